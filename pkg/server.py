import logging
import os

from apps.flask.server import app
from config.paths import DOCS_DATA_DIR, RUNS_DIR

logger = logging.getLogger("foveation.server")


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    for directory in (RUNS_DIR, DOCS_DATA_DIR):
        directory.mkdir(parents=True, exist_ok=True)
    host = os.getenv("HOST", "127.0.0.1")
    port = int(os.getenv("PORT", "5000"))
    logger.info("Serving runs from %s and static artifacts from %s", RUNS_DIR, DOCS_DATA_DIR)
    app.run(host=host, port=port, debug=False)


if __name__ == "__main__":
    main()

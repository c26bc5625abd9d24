import logging, sys, os
from datetime import datetime

_LOG_FILE = None


def setup_debugger(log_dir: str = "logs", level: int = logging.INFO) -> str:
    """Console + dated file logging and a crash hook; returns the log file path."""
    global _LOG_FILE
    if _LOG_FILE is not None:
        logging.getLogger().setLevel(level)
        return _LOG_FILE

    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, f"run_log_{datetime.now():%Y-%m-%d}.txt")
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=[
            logging.FileHandler(log_file, encoding="utf-8"),
            logging.StreamHandler(sys.stdout)
        ]
    )

    def handle_exception(exc_type, exc_value, exc_traceback):
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
            return
        logging.error("UNCAUGHT EXCEPTION", exc_info=(exc_type, exc_value, exc_traceback))
        print(f"\n[!] A crash occurred, see {log_file} for details.\n")

    sys.excepthook = handle_exception
    _LOG_FILE = log_file
    logging.info("Logging initialized. Logs will be written to %s", log_file)
    return log_file

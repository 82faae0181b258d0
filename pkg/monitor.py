import datetime
import os
import sys

from dotenv import load_dotenv

load_dotenv()


def log(stage: str, msg: str):
    # stderr, so command output and CSV pipes stay clean
    if os.getenv("LEVY_LIBOR_QUIET", "0") == "1":
        return
    now = datetime.datetime.now().strftime("%H:%M:%S")
    sys.stderr.write(f"[{now}] [{stage}] {msg}\n")
    sys.stderr.flush()

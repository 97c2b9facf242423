"""ログ出力の設定と、CLI のエラー行"""

import json
import logging
import os

from rich.console import Console
from rich.logging import RichHandler

from blind_aid.config import ENV_LOG_LEVEL

# 結果は stdout、ログと診断は stderr
stderr_console = Console(stderr=True)


def setup_logging(verbose: bool = False) -> None:
    """RichHandler を stderr に取り付ける

    レベルは -v で DEBUG、そうでなければ BLIND_AID_LOG_LEVEL (既定 INFO)。
    """
    level = "DEBUG" if verbose else os.getenv(ENV_LOG_LEVEL, "INFO")
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(
                console=stderr_console,
                show_path=False,
                rich_tracebacks=True,
            )
        ],
        force=True,
    )
    # mlflow の内部ログは WARNING 以上だけ
    logging.getLogger("mlflow").setLevel(logging.WARNING)


def error_line(code: str, message: str, path: str | None = None) -> str:
    """機械可読な 1 行のエラー ({"error", "message", "path"})"""
    record: dict[str, str] = {"error": code, "message": message}
    if path is not None:
        record["path"] = path
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))

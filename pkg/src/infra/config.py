import os
from typing import Any
from dotenv import load_dotenv  # pip install python-dotenv 필요

from infra.logging import LogAgent

# .env 파일 로드
load_dotenv()


class ConfigLoader:
    """
    [INFRA-CONFIG] 환경 변수 및 시스템 설정을 로드
    """
    @staticmethod
    def load(key: str, default: Any = None) -> Any:
        value = os.getenv(key, default)
        if value is None and default is None:
            LogAgent.warn("[CONFIG]", f"Missing configuration for key: {key}")
        return value

    @staticmethod
    def load_int(key: str, default: int) -> int:
        raw = ConfigLoader.load(key, str(default))
        try:
            return int(raw)
        except (TypeError, ValueError):
            LogAgent.warn("[CONFIG]", f"Invalid integer for {key}: {raw!r}, using {default}")
            return default

    @staticmethod
    def workers() -> int:
        """병렬 평가용 기본 쓰레드 수 (IPM_WORKERS)"""
        return max(1, ConfigLoader.load_int("IPM_WORKERS", 1))

    @staticmethod
    def log_level() -> str:
        return str(ConfigLoader.load("IPM_LOG_LEVEL", "INFO")).upper()

    @staticmethod
    def default_seed() -> int:
        return ConfigLoader.load_int("IPM_DEFAULT_SEED", 0)

    @staticmethod
    def is_prod() -> bool:
        return os.getenv("ENV", "dev") == "prod"

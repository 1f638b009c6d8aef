import json
import sys
import datetime
import logging
import uuid
from typing import Any, Optional


class LogAgent:
    """
    [INFRA-LOG] 구조화된 JSON 로그를 생성하고 트레이싱을 관리하는 에이전트
    결과 파일(CSV/JSON)이 stdout으로 나가므로 로그는 항상 stderr로 보냅니다.
    """
    _trace_id: str = "N/A"

    @classmethod
    def start_trace(cls, specific_id: Optional[str] = None):
        """새로운 실험(트랜잭션) 추적 시작"""
        cls._trace_id = specific_id or str(uuid.uuid4())

    @classmethod
    def get_trace_id(cls) -> str:
        return cls._trace_id

    @classmethod
    def _emit(cls, level: str, tag: str, message: str, payload: Optional[dict] = None):
        log_entry = {
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "level": level,
            "trace_id": cls._trace_id,
            "tag": tag,
            "message": message,
            "payload": payload or {}
        }
        print(json.dumps(log_entry, ensure_ascii=False, default=str), file=sys.stderr)

    @classmethod
    def info(cls, tag: str, message: str, payload: Optional[dict] = None):
        cls._emit("INFO", tag, message, payload)

    @classmethod
    def warn(cls, tag: str, message: str, payload: Optional[dict] = None):
        cls._emit("WARN", tag, message, payload)

    @classmethod
    def error(cls, tag: str, message: str, error: Optional[Exception] = None):
        payload = {"error_type": type(error).__name__, "error_detail": str(error)} if error else {}
        cls._emit("ERROR", tag, message, payload)

    @classmethod
    def bridge(cls, level: Any = "INFO", logger_name: str = "System") -> logging.Logger:
        """
        도메인 모듈이 사용하는 stdlib logger("System")를 LogAgent JSON 출력으로 연결
        여러 번 호출해도 핸들러는 하나만 유지됩니다.
        """
        logger = logging.getLogger(logger_name)
        logger.setLevel(level if isinstance(level, int) else str(level).upper())
        if not any(isinstance(h, _AgentHandler) for h in logger.handlers):
            logger.addHandler(_AgentHandler())
        logger.propagate = False
        return logger


class _AgentHandler(logging.Handler):
    """stdlib LogRecord -> LogAgent._emit"""

    _LEVELS = {"WARNING": "WARN", "CRITICAL": "ERROR"}

    def emit(self, record: logging.LogRecord):
        try:
            message = record.getMessage()
            tag = "[System]"
            # "[Search:Tree:exhaustive] ..." 형태의 prefix를 tag로 분리
            if message.startswith("[") and "]" in message:
                cut = message.index("]") + 1
                tag, message = message[:cut], message[cut:].strip()
            level = self._LEVELS.get(record.levelname, record.levelname)
            LogAgent._emit(level, tag, message)
        except Exception:
            self.handleError(record)

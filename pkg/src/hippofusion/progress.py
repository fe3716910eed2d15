from __future__ import annotations

import logging
from typing import Callable, List, Optional

logger = logging.getLogger(__name__)


class ProgressCallback:
    """Collects progress messages and carries a cooperative cancel flag."""

    def __init__(self, update_func: Optional[Callable[[str], None]] = None):
        self.update_func = update_func
        self.messages: List[str] = []
        self.cancelled: bool = False

    def update(self, message: str):
        """Record a progress message and forward it."""
        self.messages.append(message)
        logger.debug(message)
        if self.update_func:
            self.update_func(message)

    @property
    def last(self) -> Optional[str]:
        return self.messages[-1] if self.messages else None

    def is_cancelled(self) -> bool:
        return self.cancelled

    def cancel(self):
        self.cancelled = True

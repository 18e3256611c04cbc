import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from action_engine import ApplyResult, Database
from models import Action, DatasetSchema, SessionError
from prompts import HISTORY_EMPTY, HISTORY_ERROR_LINE

logger = logging.getLogger(__name__)


class SessionStatus(Enum):
    IDLE = "idle"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"


@dataclass
class SessionEvent:
    """Data class representing planner session events"""
    event_type: str
    run_id: str
    turn: int
    action_count: int
    additional_data: Optional[Dict[str, Any]] = None


@dataclass(frozen=True)
class SessionState:
    """Everything a planner session has produced so far"""
    database: Database
    run_id: str = "run1"
    seed: int = 0
    hard_threshold: int = 10
    applied: Tuple[Action, ...] = ()
    history: Tuple[str, ...] = ()
    turn: int = 0
    proposals: int = 0
    terminal: bool = False
    stop_reason: Optional[str] = None
    status: SessionStatus = SessionStatus.IDLE
    transcript: Tuple[Dict[str, Any], ...] = ()
    log: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = ()
    failures: Tuple[str, ...] = ()

    @property
    def schema(self) -> DatasetSchema:
        return self.database.schema

    @property
    def action_count(self) -> int:
        return len(self.applied)

    @property
    def at_threshold(self) -> bool:
        return self.action_count >= self.hard_threshold

    def render_history(self) -> str:
        """History slot of the planner prompt"""
        if not self.history:
            return HISTORY_EMPTY
        return "\n".join(self.history)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "turns": self.turn,
            "terminal": self.terminal,
            "stop_reason": self.stop_reason,
            "status": self.status.value,
            "actions": [a.to_payload() for a in self.applied],
            "failures": list(self.failures),
            "warnings": list(self.warnings),
        }


class SessionObserver(ABC):
    """Abstract base class for planner session observers"""

    @abstractmethod
    def on_turn_started(self, event: SessionEvent) -> None:
        """Called before each prompt is sent"""
        pass

    @abstractmethod
    def on_action_applied(self, event: SessionEvent) -> None:
        pass

    @abstractmethod
    def on_action_failed(self, event: SessionEvent) -> None:
        """Called when a proposed action is rejected or cannot be parsed"""
        pass

    @abstractmethod
    def on_session_finished(self, event: SessionEvent) -> None:
        pass


class PlannerSession:
    """Holds the evolving SessionState and tells observers about each step"""

    def __init__(self, database: Database, hard_threshold: int = 10, seed: int = 0, run_id: str = "run1"):
        if hard_threshold < 1:
            raise ValueError(f"hard_threshold must be at least 1, got {hard_threshold}")
        self.state = SessionState(database, run_id=run_id, seed=seed, hard_threshold=hard_threshold)
        self.observers: List[SessionObserver] = []

    def add_observer(self, observer: SessionObserver) -> None:
        self.observers.append(observer)

    def remove_observer(self, observer: SessionObserver) -> None:
        if observer in self.observers:
            self.observers.remove(observer)

    def _notify_observers(self, event_type: str, additional_data: Optional[Dict[str, Any]] = None) -> None:
        event = SessionEvent(event_type, self.state.run_id, self.state.turn, self.state.action_count, additional_data)

        for observer in self.observers:
            try:
                if event_type == "turn_started":
                    observer.on_turn_started(event)
                elif event_type == "action_applied":
                    observer.on_action_applied(event)
                elif event_type == "action_failed":
                    observer.on_action_failed(event)
                elif event_type == "finished":
                    observer.on_session_finished(event)
            except Exception as e:
                logger.warning("Observer error on %s: %s", event_type, e)

    def begin_turn(self) -> None:
        self.state = replace(self.state, turn=self.state.turn + 1, status=SessionStatus.RUNNING)
        self._notify_observers("turn_started")

    def record_message(self, role: str, content: str) -> None:
        row = {"turn": self.state.turn, "role": role, "content": content}
        self.state = replace(self.state, transcript=self.state.transcript + (row,))

    def next_proposal(self) -> int:
        self.state = replace(self.state, proposals=self.state.proposals + 1)
        return self.state.proposals

    def record_applied(self, action: Action, result: ApplyResult) -> None:
        line = json.dumps(action.to_payload(), ensure_ascii=False)
        self.state = replace(
            self.state,
            database=result.state,
            applied=self.state.applied + (action,),
            history=self.state.history + (line,),
            log=self.state.log + result.log,
            warnings=self.state.warnings + result.warnings,
        )
        self._notify_observers("action_applied", {"action": action.kind.value, "log": list(result.log)})

    def record_failure(self, number: int, error: Any, action: Optional[Action] = None) -> None:
        line = HISTORY_ERROR_LINE.format(k=number, error=error)
        self.state = replace(
            self.state,
            history=self.state.history + (line,),
            failures=self.state.failures + (line,),
        )
        data = {"error": str(error)}
        if action is not None:
            data["action"] = action.kind.value
        self._notify_observers("action_failed", data)

    def finish(self, reason: str) -> SessionState:
        self.state = replace(self.state, terminal=reason == "terminal", stop_reason=reason,
                             status=SessionStatus.FINISHED)
        self._notify_observers("finished", {"reason": reason})
        return self.state

    def fail(self, message: str) -> SessionError:
        """Mark the session failed and return the error to raise; the state keeps everything applied so far"""
        self.state = replace(self.state, stop_reason="error", status=SessionStatus.FAILED)
        self._notify_observers("finished", {"reason": "error", "error": message})
        return SessionError(message, state=self.state)

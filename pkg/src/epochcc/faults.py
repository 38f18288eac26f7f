"""Declarative fault scripts.

One action per line, ``#`` starts a comment::

    at 120 crash 2
    at 300 recover 2
    at 150 partition 1,2 | 3
    at 200 heal
    at 100 drop LogPushFrame 20
    at 400 undrop LogPushFrame
    at 250 reshard 3 2            # num_shards, replicas per shard
    on WriteSetPayload from 2 cen 5 crash

``on ... crash`` kills the sender right after the step in which it sent its
first message of that kind for that epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import FaultScriptError
from .messages import Kind
from .transport import DROPPABLE

KIND_NAMES = {
    "SubmitTxn": Kind.SUBMIT_TXN,
    "DecisionReply": Kind.DECISION_REPLY,
    "SubTxnRoute": Kind.SUB_TXN_ROUTE,
    "WriteSetPayload": Kind.WRITE_SET_PAYLOAD,
    "AbortSetPayload": Kind.ABORT_SET_PAYLOAD,
    "TxnBackup": Kind.TXN_BACKUP,
    "MembershipBeat": Kind.MEMBERSHIP_BEAT,
    "LeaderClaim": Kind.LEADER_CLAIM,
    "LogPushFrame": Kind.LOG_PUSH_FRAME,
    "LogPullRequest": Kind.LOG_PULL_REQUEST,
    "LogPullReply": Kind.LOG_PULL_REPLY,
    "AdminFrame": Kind.ADMIN_FRAME,
    "GetData": Kind.GET_DATA,
    "DataReply": Kind.DATA_REPLY,
}
KIND_LABEL = {v: k for k, v in KIND_NAMES.items()}


@dataclass(frozen=True)
class FaultAction:
    tick: int
    action: str              # crash recover partition heal drop undrop reshard
    nodes: tuple = ()
    groups: tuple = ()
    kind: Optional[Kind] = None
    pct: float = 0.0
    shards: int = 0
    replicas: int = 0


@dataclass(frozen=True)
class CrashTrigger:
    kind: Kind
    node: int
    cen: int


@dataclass
class FaultScript:
    actions: list
    triggers: list

    @classmethod
    def empty(cls) -> "FaultScript":
        return cls([], [])

    def __bool__(self):
        return bool(self.actions or self.triggers)

    def at(self, tick: int) -> list:
        return [a for a in self.actions if a.tick == tick]

    def ticks(self) -> list:
        return sorted({a.tick for a in self.actions})


def _int(tok, lineno):
    try:
        return int(tok)
    except ValueError:
        raise FaultScriptError(f"line {lineno}: expected integer, got {tok!r}") from None


def _kind(tok, lineno):
    k = KIND_NAMES.get(tok)
    if k is None:
        raise FaultScriptError(f"line {lineno}: unknown message kind {tok!r}")
    return k


def _nodes(tok, lineno):
    return tuple(_int(t, lineno) for t in tok.split(",") if t)


def parse_faults(text: str) -> FaultScript:
    actions, triggers = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "on":
            if len(tok) != 7 or tok[2] != "from" or tok[4] != "cen" or tok[6] != "crash":
                raise FaultScriptError(f"line {lineno}: expected 'on <Kind> from <n> cen <e> crash'")
            triggers.append(CrashTrigger(_kind(tok[1], lineno), _int(tok[3], lineno),
                                         _int(tok[5], lineno)))
            continue
        if tok[0] != "at" or len(tok) < 3:
            raise FaultScriptError(f"line {lineno}: expected 'at <tick> <action>'")
        tick = _int(tok[1], lineno)
        if tick < 0:
            raise FaultScriptError(f"line {lineno}: negative tick")
        act, args = tok[2], tok[3:]
        if act in ("crash", "recover"):
            if len(args) != 1:
                raise FaultScriptError(f"line {lineno}: {act} takes one node id")
            actions.append(FaultAction(tick, act, nodes=(_int(args[0], lineno),)))
        elif act == "partition":
            groups = tuple(frozenset(_nodes(g.strip(), lineno))
                           for g in " ".join(args).split("|"))
            if len(groups) < 2 or not all(groups):
                raise FaultScriptError(f"line {lineno}: partition needs two or more groups")
            actions.append(FaultAction(tick, act, groups=groups))
        elif act == "heal":
            actions.append(FaultAction(tick, act))
        elif act == "drop":
            if len(args) != 2:
                raise FaultScriptError(f"line {lineno}: drop <Kind> <percent>")
            kind = _kind(args[0], lineno)
            if kind not in DROPPABLE:
                raise FaultScriptError(
                    f"line {lineno}: {args[0]} is not droppable (only "
                    f"{', '.join(sorted(KIND_LABEL[k] for k in DROPPABLE))})")
            try:
                pct = float(args[1])
            except ValueError:
                raise FaultScriptError(f"line {lineno}: bad percent {args[1]!r}") from None
            if not 0 <= pct <= 100:
                raise FaultScriptError(f"line {lineno}: percent out of range")
            actions.append(FaultAction(tick, act, kind=kind, pct=pct))
        elif act == "undrop":
            kind = _kind(args[0], lineno) if args else None
            actions.append(FaultAction(tick, act, kind=kind))
        elif act == "reshard":
            if len(args) not in (1, 2):
                raise FaultScriptError(f"line {lineno}: reshard <shards> [<replicas>]")
            actions.append(FaultAction(tick, act, shards=_int(args[0], lineno),
                                       replicas=_int(args[1], lineno) if len(args) > 1 else 0))
        else:
            raise FaultScriptError(f"line {lineno}: unknown action {act!r}")
    actions.sort(key=lambda a: a.tick)
    return FaultScript(actions, triggers)


def load_faults(path: Optional[str]) -> FaultScript:
    if not path:
        return FaultScript.empty()
    with open(path) as fh:
        return parse_faults(fh.read())

"""Epoch-based multi-master optimistic concurrency control over pluggable KV storage."""

from .core import (
    INITIAL, AbortReason, Csn, Decision, GroupRef, OpType, ReadRecord, TaggedTxn, Tagger,
    TxnRequest, Verdict, WriteRecord, csn_precedes,
)
from .conflict import (
    EpochAbortSet, GlobalWriteVersionMap, ShardEpoch, finalize_epoch, resolve_write_set,
    validate_read_set,
)
from .harness import InProcessCluster, RunReport, ScenarioConfig, run_scenario
from .proxy import KVProxy, TxnContext
from .storage import MemStorage, StoredValue
from .workload import WorkloadSpec, gen_workload

__version__ = "0.1.0"

__all__ = [
    "INITIAL", "AbortReason", "Csn", "Decision", "GroupRef", "OpType", "ReadRecord",
    "TaggedTxn", "Tagger", "TxnRequest", "Verdict", "WriteRecord", "csn_precedes",
    "EpochAbortSet", "GlobalWriteVersionMap", "ShardEpoch", "finalize_epoch",
    "resolve_write_set", "validate_read_set", "InProcessCluster", "RunReport",
    "ScenarioConfig", "run_scenario", "KVProxy", "TxnContext", "MemStorage", "StoredValue",
    "WorkloadSpec", "gen_workload",
]

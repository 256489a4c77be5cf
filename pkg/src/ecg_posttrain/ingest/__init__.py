from .ptbxl import (
    TASKS, AnnotatedRecord, DataError, LabelTaxonomy, Statement, TaskDataset,
    build_task, describe, lead_stats, load_cache, load_ptbxl, load_records, load_taxonomy,
    normalize, parse_statement_map, subsample_train, write_cache,
)
from .wfdb import (
    EcgRecord, RecordHeader, SignalSpec, WfdbFormatError, decode_format16, encode_format16,
    parse_wfdb_header, read_record, write_record,
)

__all__ = [
    "TASKS",
    "AnnotatedRecord",
    "DataError",
    "LabelTaxonomy",
    "Statement",
    "TaskDataset",
    "build_task",
    "describe",
    "lead_stats",
    "load_cache",
    "load_ptbxl",
    "load_records",
    "load_taxonomy",
    "normalize",
    "parse_statement_map",
    "subsample_train",
    "write_cache",
    "EcgRecord",
    "RecordHeader",
    "SignalSpec",
    "WfdbFormatError",
    "decode_format16",
    "encode_format16",
    "parse_wfdb_header",
    "read_record",
    "write_record",
]

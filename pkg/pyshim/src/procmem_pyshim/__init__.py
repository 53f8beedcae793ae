"""Interop utilities for the procmem memory bank.

Exports adapters from training-stack checkpoints into the bank's tensor
container, talks to the /v1 service API, and emits the golden interop
vectors consumed by the engine's test suite. Deliberately independent of
the engine package: the only shared surfaces are the container bytes, the
manifest schema, and the HTTP wire format.
"""

from .client import client_retrieve, validate_state_payload
from .container import read_tensor_file, write_tensor_file
from .export import ExportSpec, export_adapter, load_export_spec
from .golden import emit_golden_vectors

__version__ = "0.1.0"

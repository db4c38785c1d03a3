"""Strongly consistent key-value store replicated over a grid biquorum."""

from .client import BulkReader, KVClient, PutStream
from .datacenter import (SERVICE_PORT, DatacenterConfig, Frontend, LoadBalancer,
                         build_datacenter, client_id_for)
from .quorum import QuorumSystem
from .server import ABSENT, INTERNAL_PORT, KVServer, StoredValue
from .tags import ZERO_TAG, Tag
from .wire import GET, PUT, Request, Response

__all__ = [
    "ABSENT", "GET", "INTERNAL_PORT", "PUT", "SERVICE_PORT", "ZERO_TAG",
    "BulkReader", "DatacenterConfig", "Frontend", "KVClient", "KVServer", "LoadBalancer",
    "PutStream", "QuorumSystem", "Request", "Response", "StoredValue", "Tag",
    "build_datacenter", "client_id_for",
]

"""Serverless mini-cluster with direct pull-based function-to-function transfers."""

from .cluster import ClusterConfig, LocalCluster
from .controlplane import FunctionConfig
from .dataplane import StreamingMode, TransferConfig
from .errors import (
    AbortedTransfer,
    AuthError,
    FunctionError,
    KeyNotFound,
    ObjectNotFound,
    ProducerUnreachable,
    TransferError,
    UnknownFunction,
    XdtError,
)
from .refcrypto import PlainReference, ProviderSecret, decode_reference, encode_reference
from .sdk import SdkContext, serve

__version__ = "0.1.0"

__all__ = [
    "AbortedTransfer",
    "AuthError",
    "ClusterConfig",
    "FunctionConfig",
    "FunctionError",
    "KeyNotFound",
    "LocalCluster",
    "ObjectNotFound",
    "PlainReference",
    "ProducerUnreachable",
    "ProviderSecret",
    "SdkContext",
    "StreamingMode",
    "TransferConfig",
    "TransferError",
    "UnknownFunction",
    "XdtError",
    "decode_reference",
    "encode_reference",
    "serve",
]

"""Distribution heads and the name registry used by config and model files."""

from __future__ import annotations

from dgbm.errors import InvalidParameterError
from dgbm.heads.base import DistributionHead
from dgbm.heads.flow import BernsteinFlowHead
from dgbm.heads.gaussian import GaussianHead

HEADS = {
    GaussianHead.name: GaussianHead,
    BernsteinFlowHead.name: BernsteinFlowHead,
}


def head_from_descriptor(desc: dict) -> DistributionHead:
    """Instantiate a head from ``{"name": ..., **config}``."""
    if not isinstance(desc, dict) or "name" not in desc:
        raise InvalidParameterError(f"head descriptor must be an object with a 'name', got {desc!r}")
    name = desc["name"]
    if name not in HEADS:
        raise InvalidParameterError(
            f"unknown head {name!r}; supported heads: {', '.join(sorted(HEADS))}"
        )
    if name == BernsteinFlowHead.name:
        if "order" not in desc:
            raise InvalidParameterError("bernstein_flow head requires an integer 'order'")
        return BernsteinFlowHead(order=desc["order"])
    return HEADS[name]()


__all__ = ["BernsteinFlowHead", "DistributionHead", "GaussianHead", "HEADS", "head_from_descriptor"]

"""Exception hierarchy shared by the planners, loaders and the simulator."""


class ShardPlanError(Exception):
    """Base class for every error raised by this package."""


class UnusableLink(ShardPlanError, ValueError):
    """A transfer was requested over a link with zero or missing bandwidth."""

    def __init__(self, src, dst):
        super().__init__(f"link {src}->{dst} has no usable bandwidth")
        self.src = src
        self.dst = dst


class UnsupportedLayer(ShardPlanError, KeyError):
    """A device has no profiled compute time for a layer."""

    def __init__(self, layer, device):
        super().__init__(f"layer {layer} has no compute profile on device {device}")
        self.layer = layer
        self.device = device

    def __str__(self):
        return self.args[0]


class InvalidPlan(ShardPlanError, ValueError):
    pass


class InvalidRange(ShardPlanError, ValueError):
    pass


class Infeasible(ShardPlanError):
    """No placement satisfies the memory / privacy / link constraints."""


class MemoryNotSlack(ShardPlanError, ValueError):
    """The exact unconstrained latency mode was asked to plan a memory-bound instance."""


class TooLarge(ShardPlanError):
    """Brute-force enumeration would exceed the instance-size guard."""


class KvOverflow(ShardPlanError):
    """Weights plus pre-allocated KV cache exceed a device memory budget."""


class ParseError(ShardPlanError, ValueError):
    pass


class SchemaError(ShardPlanError, ValueError):
    pass


class ConsistencyError(ShardPlanError, ValueError):
    pass


class IoError(ShardPlanError, OSError):
    pass


class InvalidSpec(ShardPlanError, ValueError):
    pass

"""The full exchangeable FlowScan likelihood.

``log p(x) = logdet(equivariant) - log n! + logdet(post-sort maps)
+ log p_base(scan)``. The post-sort maps are the order map followed by
any correspondence and recurrent couplings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .base import ARBase, FlatGaussian, IIDBase
from .core import Tensor, as_tensor, no_grad
from .errors import ConfigError, SchemaError
from .optim import ParamStore
from .scan import CorrespondenceCoupling, OrderMap, RecurrentCoupling, sort_scan
from .transforms import (DimensionMask, LeakyReLUFlow, LPEq, NWPEq, PointwiseCoupling,
                         SetCoupling, compose)

EQUIVARIANT_KINDS = ("coupling", "setcoupling", "leakyrelu", "lpeq", "nwpeq")
BASE_KINDS = ("ar", "flat", "iid")
ABLATIONS = ("full", "no-correspondence", "no-equivariant", "flat-base")


def default_equivariant(d):
    if d == 1:
        return ("nwpeq", "leakyrelu", "nwpeq")
    return ("setcoupling", "setcoupling", "nwpeq", "leakyrelu", "coupling", "coupling")


@dataclass(frozen=True)
class FlowScanConfig:
    d: int = 2
    n: int | None = None            # schema cardinality; required by the flat base
    equivariant: tuple | None = None  # None -> default_equivariant(d)
    correspondence: int = 2
    recurrent: int = 0
    sort_key: int = 0
    order_map: bool = True          # log-gap map of the sort key after the scan
    couple_key: bool = False        # let couplings transform the sort key
    base: str = "ar"
    hidden: int = 64
    layers: int = 2
    components: int = 10
    mix_hidden: int = 64
    coupling_hidden: int = 64
    embed_width: int = 32
    rec_hidden: int = 32
    leaky_slope: float = 0.8
    disable_equivariant: bool = False
    disable_correspondence: bool = False
    flat_base: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.equivariant is None:
            object.__setattr__(self, "equivariant", default_equivariant(self.d))
        elif isinstance(self.equivariant, str):
            toks = tuple(t.strip() for t in self.equivariant.split(",") if t.strip())
            object.__setattr__(self, "equivariant", toks)
        else:
            object.__setattr__(self, "equivariant", tuple(self.equivariant))
        self.validate()

    def validate(self):
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n is not None and self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        for tok in self.equivariant:
            if tok not in EQUIVARIANT_KINDS:
                raise ConfigError(f"unknown equivariant transform {tok!r}; choose from {EQUIVARIANT_KINDS}")
            if tok in ("coupling", "setcoupling") and self.d < 2 and not self.disable_equivariant:
                raise ConfigError(f"{tok} needs d >= 2")
        if self.correspondence < 0 or self.recurrent < 0:
            raise ConfigError("stack depths must be >= 0")
        if not 0 <= self.sort_key < self.d:
            raise ConfigError(f"sort_key {self.sort_key} out of range for d={self.d}")
        if self.base not in BASE_KINDS:
            raise ConfigError(f"base must be one of {BASE_KINDS}, got {self.base!r}")
        if self.effective_base == "flat" and self.n is None:
            raise ConfigError("the flat base needs the set cardinality n")
        for name in ("hidden", "layers", "components", "mix_hidden", "coupling_hidden",
                     "embed_width", "rec_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.leaky_slope > 0:
            raise ConfigError("leaky_slope must be positive")

    @property
    def effective_base(self):
        return "flat" if self.flat_base else self.base

    @property
    def equivariant_stack(self):
        return () if self.disable_equivariant else self.equivariant

    @property
    def correspondence_depth(self):
        return 0 if self.disable_correspondence else self.correspondence

    def to_dict(self):
        out = asdict(self)
        out["equivariant"] = list(self.equivariant)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def ablation(self, variant):
        """The cumulative ablation ladder: each step removes one more piece."""
        if variant == "full":
            return self
        if variant == "no-correspondence":
            return replace(self, disable_correspondence=True)
        if variant == "no-equivariant":
            return replace(self, disable_correspondence=True, disable_equivariant=True)
        if variant == "flat-base":
            return replace(self, disable_correspondence=True, disable_equivariant=True, flat_base=True)
        raise ConfigError(f"unknown ablation {variant!r}; choose from {ABLATIONS}")


class FlowScan:
    """Exchangeable density over sets of ``n`` points in ``d`` dimensions."""

    def __init__(self, config: FlowScanConfig):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(config.init_seed)
        d = config.d
        hid = (config.coupling_hidden, config.coupling_hidden)

        self.equivariant = []
        n_coupling = 0
        for i, tok in enumerate(config.equivariant_stack):
            prefix = f"eq{i}.{tok}"
            if tok in ("coupling", "setcoupling"):
                if config.couple_key or config.effective_base == "iid":
                    mask = DimensionMask.alternating(d, n_coupling)
                else:
                    # couplings leave the key alone, so the scan order is that of the data
                    mask = DimensionMask.keep_key(d, n_coupling, config.sort_key)
                n_coupling += 1
                if tok == "coupling":
                    t = PointwiseCoupling(self.store, prefix, mask, rng, hidden=hid)
                else:
                    t = SetCoupling(self.store, prefix, mask, rng, hidden=hid, width=config.embed_width)
            elif tok == "leakyrelu":
                t = LeakyReLUFlow(self.store, prefix, slope=config.leaky_slope)
            elif tok == "lpeq":
                t = LPEq(self.store, prefix, d)
            else:
                t = NWPEq(self.store, prefix, d)
            self.equivariant.append(t)

        self.post = []
        if config.effective_base != "iid":
            if config.order_map:
                self.post.append(OrderMap(d, config.sort_key))
            for i in range(config.correspondence_depth):
                parity = "even" if i % 2 == 0 else "odd"
                self.post.append(CorrespondenceCoupling(self.store, f"corr{i}", d, parity, rng, hidden=hid))
            for i in range(config.recurrent):
                self.post.append(RecurrentCoupling(self.store, f"rec{i}", d, rng, hidden=config.rec_hidden))

        kind = config.effective_base
        if kind == "ar":
            self.base = ARBase(self.store, "base", d, rng, hidden=config.hidden, layers=config.layers,
                               components=config.components, mix_hidden=config.mix_hidden)
        elif kind == "iid":
            self.base = IIDBase(self.store, "base", d, rng, components=config.components,
                                mix_hidden=config.mix_hidden)
        else:
            self.base = FlatGaussian(self.store, "base", config.n, d)

    def check_schema(self, x):
        if x.ndim != 3:
            raise SchemaError(f"expected sets shaped (B, n, d), got {x.shape}")
        if x.shape[2] != self.config.d:
            raise SchemaError(f"model expects d={self.config.d}, got d={x.shape[2]}")
        if self.config.effective_base == "flat" and x.shape[1] != self.config.n:
            raise SchemaError(f"flat-base model expects n={self.config.n}, got n={x.shape[1]}")

    def _post_stack(self, n):
        # pairing couplings are undefined for a single point
        return self.post if n >= 2 else [t for t in self.post if isinstance(t, OrderMap)]

    def log_prob(self, x):
        """Per-set log-likelihood, shape (B,)."""
        x = as_tensor(x)
        self.check_schema(x)
        y, ld_eq = compose(self.equivariant, x)
        if self.config.effective_base == "iid":
            return ld_eq + self.base.sequence_log_prob(y)
        scan = sort_scan(y, self.config.sort_key)
        z, ld_post = compose(self._post_stack(x.shape[1]), scan.sorted)
        return ld_eq + scan.correction + ld_post + self.base.sequence_log_prob(z)

    def ppll(self, x):
        x = as_tensor(x)
        return self.log_prob(x) * (1.0 / x.shape[1])

    def sample(self, n, seed, count=1, shuffle=True):
        """Draw ``count`` sets of ``n`` points; returns an array (count, n, d).

        With the order map, base draws land in sorted order by construction.
        Without it they may not; the result is a set, so they are kept as is.
        """
        if n < 1:
            raise ConfigError(f"sample needs n >= 1, got {n}")
        rng = np.random.default_rng(seed)
        with no_grad():
            z = Tensor(self.base.sample(n, count, rng))
            y, _ = compose(self._post_stack(n), z, "inverse")
            x, _ = compose(self.equivariant, y, "inverse")
        out = x.data.copy()
        if shuffle:
            for b in range(count):
                out[b] = out[b, rng.permutation(n)]
        return out

    def num_values(self):
        return self.store.num_values()


def log_prob(x, model):
    return model.log_prob(x)


def ppll(x, model):
    return model.ppll(x)


def sample(n, model, rng_seed, count=1):
    return model.sample(n, rng_seed, count=count)


def evaluate_ppll(model, sets, batch_size=256):
    """Per-set PPLL as a float array, evaluated without recording a graph.
    ``sets`` is an array (N, n, d) or a list of (n_i, d) arrays."""
    from .datasets import batches_by_size

    out = np.empty(len(sets))
    with no_grad():
        for idx, batch in batches_by_size(sets, batch_size):
            out[idx] = model.ppll(batch).data
    return out

"""Model/run configuration: the flat key=value file format and the named
preset table covering every published design point plus desk-scale variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

VIT_KINDS = ("baseline", "tr", "efficient", "raw-vit")
ATTENTION_KINDS = ("mhsa", "mhra")


class ConfigError(ValueError):
    pass


@dataclass
class ScopeformerConfig:
    variant: str = "custom"
    vit_kind: str = "baseline"
    n_backbones: int = 4
    d: int = 512                       # global feature map width
    layers: int = 8
    mlp_dim: int = 4096
    heads: int = 16
    attention: str = "mhsa"
    patch: int = 1
    cls_axis: str = "auto"             # auto | sequence | token-dim | none
    frozen_fraction: float = 0.7
    pretrain_backbone: bool = False    # the "(P)" two-stage mode
    pretrain_epochs: int = 3
    image_size: int = 64
    backbone_archs: str = "t3a,t3b,t3c,t3d"   # cycled over n_backbones
    backbone_feature_width: int = 2048
    head_hidden: int = 0               # 0 -> defaults to d
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    flip_augment: bool = False
    seed: int = 0

    # ---- derived geometry -------------------------------------------------
    @property
    def grid(self) -> int:
        """Spatial extent of the token grid before patching."""
        if self.vit_kind == "raw-vit":
            return self.image_size
        return 8

    @property
    def n_tokens(self) -> int:
        return (self.grid // self.patch) ** 2

    @property
    def resolved_cls_axis(self):
        if self.cls_axis != "auto":
            return None if self.cls_axis == "none" else self.cls_axis
        if self.vit_kind in ("baseline", "raw-vit"):
            return "sequence"
        if self.vit_kind == "tr":
            return "token-dim"
        return None

    @property
    def token_dim(self) -> int:
        if self.vit_kind == "raw-vit":
            return self.patch * self.patch * 3
        if self.vit_kind in ("baseline",):
            return self.d
        if self.vit_kind == "tr":
            extra = 1 if self.resolved_cls_axis == "token-dim" else 0
            return self.n_tokens + extra
        return self.n_tokens               # efficient

    @property
    def seq_len(self) -> int:
        if self.vit_kind in ("baseline", "raw-vit"):
            extra = 1 if self.resolved_cls_axis == "sequence" else 0
            return self.n_tokens + extra
        return self.d                      # tr / efficient (feature-wise)

    def validate(self) -> "ScopeformerConfig":
        if self.vit_kind not in VIT_KINDS:
            raise ConfigError(f"unknown vit_kind {self.vit_kind!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.vit_kind == "efficient" and self.cls_axis not in ("auto", "none"):
            raise ConfigError("efficient configuration admits no CLS token")
        if self.vit_kind != "raw-vit":
            if self.n_backbones < 1:
                raise ConfigError("n_backbones must be >= 1")
            if self.d % self.n_backbones:
                raise ConfigError(
                    f"d={self.d} not divisible by n_backbones={self.n_backbones}")
        if self.grid % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide the "
                              f"{self.grid}x{self.grid} grid")
        if self.token_dim % self.heads:
            raise ConfigError(
                f"heads={self.heads} does not divide token dim {self.token_dim}")
        if not 0.0 <= self.frozen_fraction <= 1.0:
            raise ConfigError("frozen_fraction must lie in [0, 1]")
        return self


_BOOL_KEYS = {"pretrain_backbone", "flip_augment"}
_INT_KEYS = {"n_backbones", "d", "layers", "mlp_dim", "heads", "patch",
             "pretrain_epochs", "image_size", "backbone_feature_width",
             "head_hidden", "batch_size", "epochs", "seed"}
_FLOAT_KEYS = {"frozen_fraction", "learning_rate", "beta1", "beta2",
               "adam_eps"}
_REQUIRED_KEYS = ("vit_kind", "d", "layers", "mlp_dim", "heads")
_ALL_KEYS = {f.name for f in fields(ScopeformerConfig)}


def _parse_value(key: str, raw: str, line_no: int):
    try:
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: bad value {raw!r} for key {key!r}")


def load_config(path) -> ScopeformerConfig:
    """Parse the flat `key = value` format; unknown or duplicate keys error."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"line {line_no}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _ALL_KEYS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {line_no}: duplicate key {key!r}")
            values[key] = _parse_value(key, raw, line_no)
    for key in _REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}")
    return ScopeformerConfig(**values).validate()


def write_config(cfg: ScopeformerConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for fld in fields(ScopeformerConfig):
            f.write(f"{fld.name} = {getattr(cfg, fld.name)}\n")


# ---------------------------------------------------------------------------
# published design points (plus desk-scale variants for fast experiments)

def _published(**kw) -> ScopeformerConfig:
    base = ScopeformerConfig(n_backbones=4, layers=8, mlp_dim=4096, heads=16,
                             attention="mhsa", vit_kind="baseline")
    return replace(base, **kw)


PRESETS = {
    "scopeformer-s": _published(variant="scopeformer-s", d=516, mlp_dim=3072,
                                heads=12),
    "scopeformer-b": _published(variant="scopeformer-b", d=512),
    "scopeformer-m": _published(variant="scopeformer-m", d=512, mlp_dim=5120),
    "scopeformer-l-4": _published(variant="scopeformer-l-4", d=1024, layers=4),
    "scopeformer-l-8": _published(variant="scopeformer-l-8", d=1024),
    "scopeformer-l-16": _published(variant="scopeformer-l-16", d=1024,
                                   layers=16),
    "deep-scopeformer-l-8": _published(variant="deep-scopeformer-l-8", d=1024,
                                       attention="mhra"),
    # token dim here is 65 (64 tokens + CLS on the token axis); 16 heads do
    # not divide 65, so the head count drops to the nearest divisor, 13
    "deep-scopeformer-tr-l-8": _published(variant="deep-scopeformer-tr-l-8",
                                          vit_kind="tr", n_backbones=3, d=384,
                                          attention="mhra", heads=13),
    "efficient-scopeformer": _published(variant="efficient-scopeformer",
                                        vit_kind="efficient", n_backbones=3,
                                        d=384, attention="mhra",
                                        pretrain_backbone=False),
    "efficient-scopeformer-p": _published(variant="efficient-scopeformer-p",
                                          vit_kind="efficient", n_backbones=3,
                                          d=384, attention="mhra",
                                          pretrain_backbone=True,
                                          frozen_fraction=1.0),
    # no-backbone mode: patches taken straight from the 64x64x3 image
    "raw-vit": _published(variant="raw-vit", vit_kind="raw-vit", n_backbones=0,
                          patch=8, d=384, mlp_dim=3072, heads=12),
    # desk-scale variant used by the smoke-training acceptance runs
    "efficient-desk": _published(variant="efficient-desk", vit_kind="efficient",
                                 n_backbones=3, d=96, layers=4, mlp_dim=256,
                                 heads=4, attention="mhra",
                                 backbone_feature_width=64,
                                 frozen_fraction=0.0, epochs=30),
}


def preset(name: str) -> ScopeformerConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: "
                          + ", ".join(sorted(PRESETS)))
    return replace(cfg).validate()

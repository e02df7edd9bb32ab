"""Model assembly: trainable parameters, forward pipelines, objectives.

One class covers the full method family. Structural flags turn parts of the
architecture off, which is how the ablation variants and the CoOp/KgCoOp
baselines are expressed: CoOp is exactly this model with every example
pathway disabled and the example losses zeroed, so the equivalences hold by
construction rather than by a second implementation.

Heads:
    text    prompt alignment (cosine vs. class text features, temperature)
    linear  linear classifier over the pooled summary feature
    vpt     linear classifier over [summary ; learnable visual prompt]
    vision  linear classifier over the full slide feature (no text end)
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .dataio import Manifest
from .encoders import ImageFeatureSource, StaticTextFeatures, ToyTextEncoder
from .layers import (ExampleBank, MessengerParams, SlideHeadParams,
                     SummaryParams, align_project, match_patch_examples,
                     mean_pool_forward, messenger_forward, slide_head,
                     summary_forward)
from .losses import (LossConfig, TAU_MAX, TAU_MIN, ac_loss, symmetric_ac_loss)
from .prompts import (LearnableContexts, PromptSpec, StaticDeltas,
                      build_text_features, init_contexts)

HEADS = ("text", "linear", "vpt", "vision")
TEXT_BACKENDS = ("static", "toy")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int
    n_classes: int
    summary_hidden: int = 128
    prompt_dim: int | None = None          # slide prompt width, default dim
    ctx_len: tuple[int, int, int] = (8, 8, 8)
    match_top_k: int = 1
    text_backend: str = "static"
    encoder_seed: int = 7                  # toy text encoder weights
    head: str = "text"
    kg_mu: float = 0.0                     # KgCoOp context regularizer weight
    messenger_gain: float = 6.0            # pre-softmax self-similarity scale
    gate_gain: float = 4.0                 # example-detector scale in the gate
    use_patch_examples: bool = True
    use_slide_examples: bool = True
    use_text_examples: bool = True
    use_slide_prompt: bool = True
    use_messenger: bool = True
    use_summary: bool = True
    use_example_loss: bool = True

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.text_backend not in TEXT_BACKENDS:
            raise ConfigError(f"unknown text backend {self.text_backend!r}")
        if self.match_top_k < 1:
            raise ConfigError("match_top_k must be >= 1")
        if self.prompt_dim is None:
            self.prompt_dim = self.dim
        if self.head in ("linear", "vpt"):
            # probes classify the pooled feature directly: no example
            # injection, no slide head, no text end
            self.use_patch_examples = False
            self.use_slide_examples = False
            self.use_text_examples = False
            self.use_slide_prompt = False
            self.use_example_loss = False

    @property
    def in_width(self) -> int:
        return 2 * self.dim if self.use_patch_examples else self.dim

    @property
    def pipe_width(self) -> int:
        # the Messenger preserves width, so the Summary sees in_width columns
        return self.in_width

    @property
    def concat_width(self) -> int:
        w = self.pipe_width * (2 if self.use_slide_examples else 1)
        if self.use_slide_prompt:
            w += self.prompt_dim
        return w

    @property
    def head_in(self) -> int:
        if self.head == "linear":
            return self.pipe_width
        if self.head == "vpt":
            return self.pipe_width + self.dim
        return self.dim

    @property
    def ls_active(self) -> bool:
        return (self.head == "text" and self.use_example_loss
                and self.use_text_examples and self.use_slide_examples)

    @property
    def lp_active(self) -> bool:
        return (self.head == "text" and self.use_example_loss
                and self.use_text_examples and self.use_patch_examples)


def init_params(cfg: ModelConfig, loss_cfg: LossConfig, seed: int,
                bank: ExampleBank | None = None) -> dict[str, Tensor]:
    """Build every trainable tensor for this configuration, seeded.

    Weight matrices use a scaled-uniform fan-in scheme, prompt-like vectors
    N(0, 0.02^2), biases and static-text residuals zero. Each tensor draws
    from its own derived stream, so the inventory of parameters never
    perturbs the values of the others.

    When patch examples are in play, the Summary gate starts as an
    example-similarity detector: the first hidden rows of V hold the bank
    directions (applied to the raw-feature half of each row) and w reads
    them uniformly, so attention is born looking for example-like patches
    and training refines that prior instead of rediscovering it.
    """
    params: dict[str, Tensor] = {}

    def uniform(name: str, rows: int, cols: int, fan_in: int) -> None:
        u = rng.uniforms(rng.derive_seed(seed, f"init/{name}"), rows * cols)
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = Tensor((2.0 * u - 1.0).reshape(rows, cols) * bound,
                              requires_grad=True, name=name)

    def gaussian(name: str, rows: int, cols: int, std: float = 0.02) -> None:
        g = rng.normals(rng.derive_seed(seed, f"init/{name}"), rows * cols)
        params[name] = Tensor(std * g.reshape(rows, cols),
                              requires_grad=True, name=name)

    def zeros(name: str, rows: int, cols: int) -> None:
        params[name] = Tensor(np.zeros((rows, cols)), requires_grad=True,
                              name=name)

    if cfg.use_messenger:
        # Near-identity init: Q.K^T starts out as a (scaled) similarity
        # kernel, so self-attention groups similar patches instead of
        # averaging the whole bag into one row. The gain sets how peaked
        # that grouping is before training.
        c = math.sqrt(cfg.messenger_gain * math.sqrt(cfg.pipe_width))
        eye = np.eye(cfg.pipe_width, cfg.in_width)
        for part, diag in (("wq", c), ("wk", c), ("wv", 1.0)):
            name = f"messenger.{part}"
            uniform(name, cfg.pipe_width, cfg.in_width, cfg.in_width)
            params[name].data = 0.05 * params[name].data + diag * eye
    if cfg.use_summary:
        uniform("summary.v", cfg.summary_hidden, cfg.pipe_width, cfg.pipe_width)
        uniform("summary.w", 1, cfg.summary_hidden, cfg.summary_hidden)
        if cfg.use_patch_examples and bank is not None:
            mean_dir = bank.patch_vectors.mean(axis=0)
            mean_dir /= np.linalg.norm(mean_dir)
            v = params["summary.v"].data
            v[0, :] = 0.0
            v[0, :cfg.dim] = cfg.gate_gain * mean_dir
            w = params["summary.w"].data
            w[0, :] = 0.0
            w[0, 0] = 1.0

    if cfg.head in ("text", "vision"):
        uniform("slide.proj_w", cfg.dim, cfg.concat_width, cfg.concat_width)
        # wider projector output: the normalized slide feature's direction
        # stiffens with the pre-normalization norm, keeping the first
        # optimizer steps from slinging it around
        params["slide.proj_w"].data *= 4.0
        zeros("slide.proj_b", 1, cfg.dim)
        if cfg.use_slide_prompt:
            gaussian("slide.prompt", 1, cfg.prompt_dim)

    if cfg.head == "text":
        if cfg.ls_active:
            uniform("align.w", cfg.dim, cfg.pipe_width, cfg.pipe_width)
        params["loss.log_tau"] = Tensor([[math.log(loss_cfg.tau_init)]],
                                        requires_grad=True, name="loss.log_tau")
        if cfg.text_backend == "toy":
            m_a, m_b, m_g = cfg.ctx_len
            if not cfg.use_text_examples:
                m_b = m_g = 0
            ctx = init_contexts(m_a, m_b, m_g, cfg.dim,
                                rng.derive_seed(seed, "init/ctx"))
            params["ctx.alpha"] = ctx.alpha
            if cfg.use_text_examples:
                params["ctx.beta"] = ctx.beta
                params["ctx.gamma"] = ctx.gamma
        else:
            zeros("delta.task", 1, cfg.dim)
            if cfg.use_text_examples:
                zeros("delta.slide", 1, cfg.dim)
                zeros("delta.patch", 1, cfg.dim)
    else:
        uniform("head.w", cfg.n_classes, cfg.head_in, cfg.head_in)
        zeros("head.b", 1, cfg.n_classes)
        if cfg.head == "vpt":
            gaussian("vpt.prompt", 1, cfg.dim)

    return params


@dataclass
class BagForward:
    """Per-bag forward products kept for reports and predictions."""

    feature: Tensor                  # 1 x dim (text/vision) or 1 x width
    attention: np.ndarray            # (n,) summary weights
    patch_match: np.ndarray | None   # (n,) matched bank indices
    patch_cos: np.ndarray | None     # (n,) matched cosines
    slide_match: int | None = None
    slide_cos: float | None = None


class Model:
    """A configured method instance bound to one manifest."""

    def __init__(self, manifest: Manifest, cfg: ModelConfig,
                 loss_cfg: LossConfig | None = None, seed: int = 0):
        if cfg.dim != manifest.dim:
            raise ConfigError(f"model dim {cfg.dim} != manifest dim {manifest.dim}")
        if cfg.n_classes != manifest.n_classes:
            raise ConfigError(f"model classes {cfg.n_classes} != manifest "
                              f"classes {manifest.n_classes}")
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.seed = seed
        self.manifest = manifest
        self.source = ImageFeatureSource(manifest)
        self.bank: ExampleBank | None = None
        if cfg.use_patch_examples or cfg.use_slide_examples:
            self.bank = ExampleBank.from_manifest(manifest)
        self.spec: PromptSpec | None = None
        self.text_backend: ToyTextEncoder | StaticTextFeatures | None = None
        if cfg.head == "text":
            ctx = dict(zip(("task", "slide", "patch"), cfg.ctx_len))
            self.spec = PromptSpec.from_manifest(manifest, ctx)
            if cfg.text_backend == "toy":
                self.text_backend = ToyTextEncoder(cfg.dim, cfg.encoder_seed)
            else:
                self.text_backend = StaticTextFeatures.from_manifest(manifest)
        self.params = init_params(cfg, self.loss_cfg, seed, bank=self.bank)
        self._kg_ref: np.ndarray | None = None

    # -- parameter views ----------------------------------------------------

    def _contexts(self) -> LearnableContexts | StaticDeltas:
        p = self.params
        if self.cfg.text_backend == "toy":
            empty = Tensor(np.zeros((0, self.cfg.dim)))
            return LearnableContexts(alpha=p["ctx.alpha"],
                                     beta=p.get("ctx.beta", empty),
                                     gamma=p.get("ctx.gamma", empty))
        zero = Tensor(np.zeros((1, self.cfg.dim)))
        return StaticDeltas(task=p["delta.task"],
                            slide=p.get("delta.slide", zero),
                            patch=p.get("delta.patch", zero))

    def _messenger(self) -> MessengerParams:
        p = self.params
        return MessengerParams(p["messenger.wq"], p["messenger.wk"],
                               p["messenger.wv"])

    def _summary(self) -> SummaryParams:
        return SummaryParams(self.params["summary.v"], self.params["summary.w"])

    def _slide_head(self) -> SlideHeadParams:
        return SlideHeadParams(proj_w=self.params["slide.proj_w"],
                               proj_b=self.params["slide.proj_b"],
                               prompt=self.params.get("slide.prompt"))

    # -- forward pieces -----------------------------------------------------

    def summary_feature(self, feats: np.ndarray,
                        ) -> tuple[Tensor, Tensor, np.ndarray | None, np.ndarray | None]:
        """bag patches -> pooled feature (1 x width) + attention row."""
        idx = cos = None
        if self.cfg.use_patch_examples:
            assert self.bank is not None
            idx, cos, aug = match_patch_examples(feats, self.bank,
                                                 self.cfg.match_top_k)
            x = Tensor(aug)
        else:
            x = Tensor(feats)
        fml = messenger_forward(x, self._messenger()) if self.cfg.use_messenger else x
        if self.cfg.use_summary:
            fs, attn = summary_forward(fml, self._summary())
        else:
            fs, attn = mean_pool_forward(fml)
        return fs, attn, idx, cos

    def example_slide_features(self) -> Tensor:
        """Recompute the m x width example-slide matrix with current params."""
        assert self.bank is not None
        rows = []
        for sid in self.bank.slide_ids:
            fs, _, _, _ = self.summary_feature(self.source.bag(sid).features)
            rows.append(fs)
        return ad.concat_rows(rows)

    def bag_forward(self, feats: np.ndarray, z: Tensor | None) -> BagForward:
        fs, attn, idx, cos = self.summary_feature(feats)
        if self.cfg.head in ("linear", "vpt"):
            return BagForward(fs, attn.data[0].copy(), idx, cos)
        fi, m_idx, m_cos = slide_head(
            fs, z if self.cfg.use_slide_examples else None, self._slide_head())
        return BagForward(fi, attn.data[0].copy(), idx, cos, m_idx, m_cos)

    def text_features(self, groups: tuple[str, ...]) -> dict[str, Tensor]:
        assert self.spec is not None and self.text_backend is not None
        return build_text_features(self.spec, self._contexts(),
                                   self.text_backend, groups)

    def kg_reference(self) -> np.ndarray:
        """Frozen zero-context task features for the KgCoOp regularizer."""
        if self._kg_ref is None:
            assert self.spec is not None
            if self.cfg.text_backend == "toy":
                ctx = LearnableContexts(*(Tensor(np.zeros((0, self.cfg.dim)))
                                          for _ in range(3)))
            else:
                ctx = StaticDeltas(*(Tensor(np.zeros((1, self.cfg.dim)))
                                     for _ in range(3)))
            ref = build_text_features(self.spec, ctx, self.text_backend,
                                      ("task",))
            self._kg_ref = ref["task"].data.copy()
        return self._kg_ref

    # -- objectives -----------------------------------------------------------

    def training_loss(self, bags: list[np.ndarray], labels: list[int],
                      ) -> tuple[Tensor, dict[str, float]]:
        """Build the full objective graph for one (tiny) batch.

        Returns the scalar root and a float breakdown of the components.
        The graph is rebuilt from scratch on every call.
        """
        cfg = self.cfg
        if len(bags) != len(labels):
            raise ConfigError("one label per bag required")
        if cfg.head != "text":
            return self._probe_loss(bags, labels)

        groups = ["task"]
        if cfg.ls_active and self.loss_cfg.lambda1 > 0:
            groups.append("slide")
        if cfg.lp_active and self.loss_cfg.lambda2 > 0:
            groups.append("patch")
        text = self.text_features(tuple(groups))

        z = self.example_slide_features() if cfg.use_slide_examples else None
        rows = [self.bag_forward(b, z).feature for b in bags]
        feats = ad.concat_rows(rows) if len(rows) > 1 else rows[0]
        log_tau = self.params["loss.log_tau"]

        loss_fn = symmetric_ac_loss if self.loss_cfg.symmetric else ac_loss
        l_t = loss_fn(feats, text["task"], labels, log_tau)
        total = l_t
        breakdown = {"l_t": l_t.item(), "l_s": 0.0, "l_p": 0.0, "kg": 0.0}

        if "slide" in text:
            assert self.bank is not None and z is not None
            zs = align_project(z, self.params["align.w"])
            l_s = loss_fn(zs, text["slide"], self.bank.slide_tags, log_tau)
            total = ad.add(total, ad.scale(l_s, self.loss_cfg.lambda1))
            breakdown["l_s"] = l_s.item()
        if "patch" in text:
            assert self.bank is not None
            l_p = loss_fn(Tensor(self.bank.patch_vectors), text["patch"],
                          self.bank.patch_tags, log_tau)
            total = ad.add(total, ad.scale(l_p, self.loss_cfg.lambda2))
            breakdown["l_p"] = l_p.item()
        if cfg.kg_mu > 0:
            ref = Tensor(-self.kg_reference())
            diff = ad.add(text["task"], ref)
            reg = ad.scale(ad.tsum(ad.mul(diff, diff)), 1.0 / cfg.n_classes)
            total = ad.add(total, ad.scale(reg, cfg.kg_mu))
            breakdown["kg"] = reg.item()

        breakdown["total"] = total.item()
        return total, breakdown

    def _probe_loss(self, bags: list[np.ndarray], labels: list[int],
                    ) -> tuple[Tensor, dict[str, float]]:
        cfg = self.cfg
        z = None
        if cfg.head == "vision" and cfg.use_slide_examples:
            z = self.example_slide_features()
        rows = [self.bag_forward(b, z).feature for b in bags]
        feats = ad.concat_rows(rows) if len(rows) > 1 else rows[0]
        if cfg.head == "vpt":
            prompt = ad.broadcast_row(self.params["vpt.prompt"], feats.shape[0])
            feats = ad.concat_cols([feats, prompt])
        logits = ad.affine(feats, self.params["head.w"], self.params["head.b"])
        total = ad.mean_rows(ad.nll_indexed_softmax(logits, labels))
        value = total.item()
        return total, {"l_t": value, "l_s": 0.0, "l_p": 0.0, "kg": 0.0,
                       "total": value}

    # -- inference ------------------------------------------------------------

    def tau(self) -> float:
        t = self.params["loss.log_tau"].item()
        return float(np.exp(t))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Freeze text/example features for repeated test-time forwards."""
        snap: dict[str, np.ndarray] = {}
        if self.cfg.head == "text":
            snap["text.task"] = self.text_features(("task",))["task"].data.copy()
        if (self.cfg.head in ("text", "vision")) and self.cfg.use_slide_examples:
            snap["z"] = self.example_slide_features().data.copy()
        return snap

    def predict_bag(self, feats: np.ndarray,
                    snap: dict[str, np.ndarray]) -> tuple[np.ndarray, BagForward]:
        from .losses import predict_probs

        z = Tensor(snap["z"]) if "z" in snap else None
        out = self.bag_forward(feats, z)
        if self.cfg.head == "text":
            probs = predict_probs(out.feature.data[0], snap["text.task"],
                                  self.tau())
        else:
            feat = out.feature
            if self.cfg.head == "vpt":
                feat = ad.concat_cols([feat, self.params["vpt.prompt"]])
            logits = ad.affine(feat, self.params["head.w"], self.params["head.b"])
            row = logits.data[0] - logits.data[0].max()
            e = np.exp(row)
            probs = e / e.sum()
        return probs, out

    # -- bookkeeping ----------------------------------------------------------

    def clamp(self) -> None:
        """Post-step projections: keep tau inside its stability interval."""
        if "loss.log_tau" in self.params:
            t = self.params["loss.log_tau"]
            t.data = np.clip(t.data, math.log(TAU_MIN), math.log(TAU_MAX))

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes(order="C"))
        return h.hexdigest()

    def frozen_digest(self) -> str:
        """Digest of everything that must not move during training."""
        h = hashlib.sha256()
        if isinstance(self.text_backend, ToyTextEncoder):
            h.update(self.text_backend.weight_digest().encode())
        elif isinstance(self.text_backend, StaticTextFeatures):
            h.update(self.text_backend.digest().encode())
        if self.bank is not None:
            h.update(self.bank.patch_vectors.tobytes(order="C"))
            for sid in self.bank.slide_ids:
                h.update(self.source.bag(sid).features.tobytes(order="C"))
        return h.hexdigest()

    def save_params(self, path) -> None:
        np.savez(path, **{name: t.data for name, t in self.params.items()})

    def load_params(self, path) -> None:
        with np.load(path) as stored:
            names = set(stored.files)
            if names != set(self.params):
                raise ConfigError(
                    f"checkpoint parameters {sorted(names)} do not match model "
                    f"parameters {sorted(self.params)}")
            for name in stored.files:
                arr = np.asarray(stored[name], dtype=np.float64)
                if arr.shape != self.params[name].data.shape:
                    raise ConfigError(f"checkpoint shape {arr.shape} != model "
                                      f"shape {self.params[name].data.shape} "
                                      f"for {name!r}")
                self.params[name].data = arr

"""Small diffusion transformer with guidance attention and hand-written backward.

Token sequence per sample: noisy-context tokens first, then history tokens
(long, mid, short term, each with its own bias-free patch embedder). History
tokens are always conditioned on the t = 0 timestep embedding; noisy tokens on
the sampler timestep plus a learned stage embedding. Cross-attention to the
prompt updates noisy tokens only. Outputs at history positions are discarded.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..context import HistoryContext, MemoryPlan
from ..latent import DimensionError, check_latent
from . import layers as L

CKPT_MAGIC = b"HLCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DitConfig:
    channels: int = 4
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    text_dim: int = 16
    time_dim: int = 16
    stages: int = 3
    patch: tuple[int, int, int] = (1, 2, 2)
    mlp_ratio: int = 2
    rope_theta: float = 10000.0
    rope_temporal: str = "post"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary pairs")
        if self.rope_temporal not in ("post", "pre"):
            raise ValueError("rope_temporal must be 'post' or 'pre'")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        pt, ph, pw = self.patch
        return self.channels * pt * ph * pw


def patchify(x, kernel):
    b, c, t, h, w = x.shape
    pt, ph, pw = kernel
    if t % pt or h % ph or w % pw:
        raise DimensionError(f"grid {(t, h, w)} not divisible by kernel {kernel}")
    x = x.reshape(b, c, t // pt, pt, h // ph, ph, w // pw, pw)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, (t // pt) * (h // ph) * (w // pw), c * pt * ph * pw)


def unpatchify(tokens, kernel, shape):
    b, c, t, h, w = shape
    pt, ph, pw = kernel
    x = tokens.reshape(b, t // pt, h // ph, w // pw, c, pt, ph, pw)
    x = x.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(shape)


def init_params(cfg: DitConfig, plan: MemoryPlan, seed: int = 0) -> dict[str, np.ndarray]:
    from ..latent import make_rng

    rng = make_rng(seed)
    d, m = cfg.d_model, cfg.d_model * cfg.mlp_ratio

    def w(fan_in, *shape, gain=1.0):
        return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))

    p: dict[str, np.ndarray] = {
        "noisy_embed.w": w(cfg.patch_dim, cfg.patch_dim, d),
        "noisy_embed.b": np.zeros(d),
        "t_mlp.w1": w(cfg.time_dim, cfg.time_dim, d),
        "t_mlp.b1": np.zeros(d),
        "t_mlp.w2": w(d, d, d),
        "t_mlp.b2": np.zeros(d),
        "stage_embed": rng.standard_normal((cfg.stages, d)) * 0.1,
        "text_proj.w": w(cfg.text_dim, cfg.text_dim, d),
        "final.norm": np.ones(d),
        "final.mod.w": w(d, d, 2 * d, gain=0.1),
        "final.mod.b": np.zeros(2 * d),
        "head.w": w(d, d, cfg.patch_dim, gain=0.5),
        "head.b": np.zeros(cfg.patch_dim),
    }
    for i, (pt, ph, pw) in enumerate(plan.kernels):
        fan = cfg.channels * pt * ph * pw
        p[f"hist_embed.{i}.w"] = w(fan, fan, d)
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}."
        p[pre + "mod.w"] = w(d, d, 4 * d, gain=0.1)
        p[pre + "mod.b"] = np.zeros(4 * d)
        for name in ("norm1", "norm2", "norm3"):
            p[pre + name] = np.ones(d)
        for name in ("q", "k", "v", "o", "cq", "ck", "cv", "co"):
            p[pre + name] = w(d, d, d)
        p[pre + "amp"] = np.ones((cfg.n_heads, cfg.head_dim))
        p[pre + "mlp.w1"] = w(d, d, m)
        p[pre + "mlp.b1"] = np.zeros(m)
        p[pre + "mlp.w2"] = w(m, m, d)
        p[pre + "mlp.b2"] = np.zeros(d)
    return p


@dataclass
class ForwardCache:
    shapes: dict
    layers: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


class ToyDiT:
    """Velocity network ``u(x, history, text, lambda, stage)``.

    Parameters live in ``self.params`` (a name -> float64 array dict) so that
    optimizers, EMA and checkpoints treat them uniformly.
    """

    def __init__(self, cfg: DitConfig, plan: MemoryPlan, params: Optional[dict] = None, seed: int = 0):
        self.cfg = cfg
        self.plan = plan
        self.params = params if params is not None else init_params(cfg, plan, seed)
        self._freqs = L.rope_frequencies(cfg.head_dim, cfg.rope_theta)
        self._rope_cache: dict = {}

    def copy(self) -> "ToyDiT":
        return ToyDiT(self.cfg, self.plan, {k: v.copy() for k, v in self.params.items()})

    # -- token geometry -------------------------------------------------
    def _positions(self, stage: int, t_noisy: int, h: int, w: int):
        key = (stage, t_noisy, h, w)
        if key in self._rope_cache:
            return self._rope_cache[key]
        cfg, plan = self.cfg, self.plan
        scale = 2 ** (cfg.stages - stage)
        pos = []
        t_off = 0
        hist_pos = []
        for i, sl in plan.term_slices():
            pt, ph, pw = plan.kernels[i]
            nt = plan.term_lengths[i] // pt
            for ti in range(nt):
                if cfg.rope_temporal == "post":
                    tpos = t_off + ti
                else:
                    tpos = sl.start + ti * pt + (pt - 1) / 2
                for yi in range(plan.height // ph):
                    for xi in range(plan.width // pw):
                        hist_pos.append((tpos, (yi + 0.5) * ph, (xi + 0.5) * pw))
            t_off += nt
        t_hist = t_off if cfg.rope_temporal == "post" else plan.window
        pt, ph, pw = cfg.patch
        for ti in range(t_noisy // pt):
            for yi in range(h // ph):
                for xi in range(w // pw):
                    pos.append((t_hist + ti, (yi + 0.5) * ph * scale, (xi + 0.5) * pw * scale))
        allpos = np.array(pos + hist_pos, dtype=np.float64)
        tables = L.rope_tables(allpos, self._freqs)
        self._rope_cache[key] = (allpos, *tables)
        return self._rope_cache[key]

    def hist_token_count(self) -> int:
        plan = self.plan
        return sum(
            (n // pt) * (plan.height // ph) * (plan.width // pw)
            for n, (pt, ph, pw) in zip(plan.term_lengths, plan.kernels)
        )

    def _embed_history(self, frames, b):
        p, plan = self.params, self.plan
        toks, patches = [], []
        for i, sl in plan.term_slices():
            pa = patchify(frames[:, :, sl], plan.kernels[i])
            patches.append((i, pa))
            toks.append(pa @ p[f"hist_embed.{i}.w"])
        return np.concatenate(toks, axis=1), patches

    # -- forward --------------------------------------------------------
    def forward(self, noisy, history, text, lam, stage: int, taps: Iterable[int] = ()):
        """Predict the velocity for ``noisy`` at stage ``stage`` (1-based).

        ``history`` may be a :class:`HistoryContext`, a raw ``(B,C,T_hist,H,W)`` array,
        or ``None`` (text-to-video: every history token is zero).

        Returns ``(u, cache, tap_activations)``.
        """
        p, cfg, plan = self.params, self.cfg, self.plan
        noisy = check_latent(noisy).astype(np.float64)
        b, c, tn, h, w = noisy.shape
        if not 1 <= stage <= cfg.stages:
            raise ValueError(f"stage must be in 1..{cfg.stages}, got {stage}")
        scale = 2 ** (cfg.stages - stage)
        if c != cfg.channels or h * scale != plan.height or w * scale != plan.width:
            raise DimensionError(f"noisy shape {noisy.shape} does not fit stage {stage}")
        taps = set(taps)

        pn = patchify(noisy, cfg.patch)
        xn = pn @ p["noisy_embed.w"] + p["noisy_embed.b"]
        nn_ = xn.shape[1]
        if history is None:
            xh = np.zeros((b, self.hist_token_count(), cfg.d_model))
            hist_patches = None
        else:
            frames = history.frames if isinstance(history, HistoryContext) else history
            frames = check_latent(frames).astype(np.float64)
            if frames.shape[2] != plan.window or frames.shape[3:] != (plan.height, plan.width):
                raise DimensionError(f"history shape {frames.shape} does not match the memory plan")
            if frames.shape[0] != b:
                frames = np.broadcast_to(frames, (b,) + frames.shape[1:])
            xh, hist_patches = self._embed_history(frames, b)
        x = np.concatenate([xn, xh], axis=1)
        n_tok = x.shape[1]

        lam = np.broadcast_to(np.atleast_1d(np.asarray(lam, dtype=np.float64)), (b,)).copy()
        e = L.sinusoidal_embedding(np.concatenate([lam * 1000.0, [0.0]]), cfg.time_dim)
        th1 = e @ p["t_mlp.w1"] + p["t_mlp.b1"]
        ta1 = L.silu(th1)
        cvec = ta1 @ p["t_mlp.w2"] + p["t_mlp.b2"]
        c_n = cvec[:b] + p["stage_embed"][stage - 1]
        c_h = cvec[b:]
        sc_n, sc_h = L.silu(c_n), L.silu(c_h)

        if text is None:
            text = np.zeros((1, cfg.text_dim))
        text = np.asarray(text, dtype=np.float64)
        if text.ndim == 2:
            text = np.broadcast_to(text, (b,) + text.shape)
        txt = text @ p["text_proj.w"]

        _, cos, sin = self._positions(stage, tn, h, w)
        cache = ForwardCache(shapes=dict(b=b, nn=nn_, n=n_tok, noisy_shape=noisy.shape, stage=stage))
        tap_out = {}
        d, nh = cfg.d_model, cfg.n_heads
        for l in range(cfg.n_layers):
            pre = f"blocks.{l}."
            mod_n = sc_n @ p[pre + "mod.w"] + p[pre + "mod.b"]
            mod_h = sc_h @ p[pre + "mod.w"] + p[pre + "mod.b"]
            modtok = np.concatenate(
                [np.broadcast_to(mod_n[:, None], (b, nn_, 4 * d)),
                 np.broadcast_to(mod_h[:, None], (b, n_tok - nn_, 4 * d))], axis=1)
            shift1, scale1, shift2, scale2 = np.split(modtok, 4, axis=-1)

            n1, nc1 = L.rmsnorm(x, p[pre + "norm1"])
            a = n1 * (1.0 + scale1) + shift1
            q = L.split_heads(a @ p[pre + "q"], nh)
            k = L.split_heads(a @ p[pre + "k"], nh)
            v = L.split_heads(a @ p[pre + "v"], nh)
            qr = L.apply_rope(q, cos, sin)
            kr = L.apply_rope(k, cos, sin)
            att, gac = L.guidance_attention(
                qr[:, :, :nn_], kr[:, :, :nn_], v[:, :, :nn_],
                qr[:, :, nn_:], kr[:, :, nn_:], v[:, :, nn_:], p[pre + "amp"])
            am = L.merge_heads(att)
            x1 = x + am @ p[pre + "o"]

            n2, nc2 = L.rmsnorm(x1[:, :nn_], p[pre + "norm2"])
            cq = L.split_heads(n2 @ p[pre + "cq"], nh)
            ck = L.split_heads(txt @ p[pre + "ck"], nh)
            cv = L.split_heads(txt @ p[pre + "cv"], nh)
            co, cac = L.cross_attention(cq, ck, cv)
            cm = L.merge_heads(co)
            x2 = x1.copy()
            x2[:, :nn_] += cm @ p[pre + "co"]

            n3, nc3 = L.rmsnorm(x2, p[pre + "norm3"])
            mm = n3 * (1.0 + scale2) + shift2
            hpre = mm @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
            hact = L.silu(hpre)
            x3 = x2 + hact @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]

            cache.layers.append(dict(
                x=x, n1=n1, nc1=nc1, scale1=scale1, a=a, gac=gac, am=am, x1=x1,
                n2=n2, nc2=nc2, cac=cac, cm=cm, x2=x2, n3=n3, nc3=nc3, scale2=scale2,
                mm=mm, hpre=hpre, hact=hact))
            x = x3
            if l in taps:
                tap_out[l] = x3[:, :nn_]

        modf = sc_n @ p["final.mod.w"] + p["final.mod.b"]
        shift_f, scale_f = np.split(modf[:, None, :], 2, axis=-1)
        xf = x[:, :nn_]
        nf, ncf = L.rmsnorm(xf, p["final.norm"])
        y = nf * (1.0 + scale_f) + shift_f
        out = y @ p["head.w"] + p["head.b"]
        u = unpatchify(out, cfg.patch, noisy.shape)

        cache.extra.update(
            pn=pn, hist_patches=hist_patches, e=e, th1=th1, ta1=ta1, c_n=c_n, c_h=c_h,
            sc_n=sc_n, sc_h=sc_h, text=text, txt=txt, cos=cos, sin=sin,
            xf=xf, nf=nf, ncf=ncf, scale_f=scale_f, y=y, taps=taps)
        return u, cache, tap_out

    def __call__(self, noisy, history, text, lam, stage):
        return self.forward(noisy, history, text, lam, stage)[0]

    # -- backward -------------------------------------------------------
    def backward(self, g_u, cache: ForwardCache, g_taps: Optional[dict] = None):
        """Gradients of a scalar loss given dL/du (and optionally dL/d tap activations).

        Returns ``(param_grads, d_noisy)``.
        """
        if cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        p, cfg = self.params, self.cfg
        ex, sh = cache.extra, cache.shapes
        b, nn_, n_tok = sh["b"], sh["nn"], sh["n"]
        d, nh = cfg.d_model, cfg.n_heads
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g_taps = g_taps or {}

        if g_u is None:
            g_u = np.zeros(sh["noisy_shape"])
        g_out = patchify(np.asarray(g_u, dtype=np.float64), cfg.patch)
        _, grads["head.w"], grads["head.b"] = L.linear_backward(g_out, ex["y"], p["head.w"])
        g_y = g_out @ p["head.w"].T
        g_nf = g_y * (1.0 + ex["scale_f"])
        g_scale_f = np.sum(g_y * ex["nf"], axis=1)
        g_shift_f = np.sum(g_y, axis=1)
        g_xf, grads["final.norm"] = L.rmsnorm_backward(g_nf, ex["xf"], p["final.norm"], ex["ncf"])
        g_modf = np.concatenate([g_shift_f, g_scale_f], axis=-1)
        grads["final.mod.w"] = ex["sc_n"].T @ g_modf
        grads["final.mod.b"] = g_modf.sum(axis=0)
        g_sc_n = g_modf @ p["final.mod.w"].T
        g_sc_h = np.zeros_like(ex["sc_h"])

        g_x = np.zeros((b, n_tok, d))
        g_x[:, :nn_] = g_xf
        g_txt = np.zeros_like(ex["txt"])
        cos, sin = ex["cos"], ex["sin"]

        for l in reversed(range(cfg.n_layers)):
            pre = f"blocks.{l}."
            c = cache.layers[l]
            if l in g_taps:
                g_x[:, :nn_] += g_taps[l]
            # MLP
            g_x2 = g_x.copy()
            g_hact = g_x @ p[pre + "mlp.w2"].T
            grads[pre + "mlp.w2"] += c["hact"].reshape(-1, c["hact"].shape[-1]).T @ g_x.reshape(-1, d)
            grads[pre + "mlp.b2"] += g_x.reshape(-1, d).sum(axis=0)
            g_hpre = L.silu_backward(g_hact, c["hpre"])
            g_mm, dw, db = L.linear_backward(g_hpre, c["mm"], p[pre + "mlp.w1"])
            grads[pre + "mlp.w1"] += dw
            grads[pre + "mlp.b1"] += db
            g_n3 = g_mm * (1.0 + c["scale2"])
            g_scale2 = g_mm * c["n3"]
            g_shift2 = g_mm
            dx, dg = L.rmsnorm_backward(g_n3, c["x2"], p[pre + "norm3"], c["nc3"])
            grads[pre + "norm3"] += dg
            g_x2 += dx
            # cross attention (noisy rows only)
            g_x1 = g_x2.copy()
            g_cout = g_x2[:, :nn_]
            g_cm, dw, _ = L.linear_backward(g_cout, c["cm"], p[pre + "co"], has_bias=False)
            grads[pre + "co"] += dw
            g_cq, g_ck, g_cv = L.attention_backward(L.split_heads(g_cm, nh), c["cac"])
            g_cq, g_ck, g_cv = L.merge_heads(g_cq), L.merge_heads(g_ck), L.merge_heads(g_cv)
            g_n2, dw, _ = L.linear_backward(g_cq, c["n2"], p[pre + "cq"], has_bias=False)
            grads[pre + "cq"] += dw
            dtx, dw, _ = L.linear_backward(g_ck, ex["txt"], p[pre + "ck"], has_bias=False)
            grads[pre + "ck"] += dw
            g_txt += dtx
            dtx, dw, _ = L.linear_backward(g_cv, ex["txt"], p[pre + "cv"], has_bias=False)
            grads[pre + "cv"] += dw
            g_txt += dtx
            dx, dg = L.rmsnorm_backward(g_n2, c["x1"][:, :nn_], p[pre + "norm2"], c["nc2"])
            grads[pre + "norm2"] += dg
            g_x1[:, :nn_] += dx
            # self attention
            g_x0 = g_x1.copy()
            g_am, dw, _ = L.linear_backward(g_x1, c["am"], p[pre + "o"], has_bias=False)
            grads[pre + "o"] += dw
            dqn, dkn, dvn, dqh, dkh, dvh, damp = L.guidance_attention_backward(
                L.split_heads(g_am, nh), c["gac"])
            grads[pre + "amp"] += damp
            g_qr = np.concatenate([dqn, dqh], axis=2)
            g_kr = np.concatenate([dkn, dkh], axis=2)
            g_v = np.concatenate([dvn, dvh], axis=2)
            g_q = L.merge_heads(L.rope_backward(g_qr, cos, sin))
            g_k = L.merge_heads(L.rope_backward(g_kr, cos, sin))
            g_v = L.merge_heads(g_v)
            g_a = np.zeros_like(c["a"])
            for name, gg in (("q", g_q), ("k", g_k), ("v", g_v)):
                da, dw, _ = L.linear_backward(gg, c["a"], p[pre + name], has_bias=False)
                grads[pre + name] += dw
                g_a += da
            g_n1 = g_a * (1.0 + c["scale1"])
            g_scale1 = g_a * c["n1"]
            g_shift1 = g_a
            dx, dg = L.rmsnorm_backward(g_n1, c["x"], p[pre + "norm1"], c["nc1"])
            grads[pre + "norm1"] += dg
            g_x0 += dx
            # modulation
            g_mod = np.concatenate([g_shift1, g_scale1, g_shift2, g_scale2], axis=-1)
            g_mod_n = g_mod[:, :nn_].sum(axis=1)
            g_mod_h = g_mod[:, nn_:].sum(axis=(0, 1))[None]
            grads[pre + "mod.w"] += ex["sc_n"].T @ g_mod_n + ex["sc_h"].T @ g_mod_h
            grads[pre + "mod.b"] += g_mod_n.sum(axis=0) + g_mod_h[0]
            g_sc_n += g_mod_n @ p[pre + "mod.w"].T
            g_sc_h += g_mod_h @ p[pre + "mod.w"].T
            g_x = g_x0

        # conditioning
        g_c_n = L.silu_backward(g_sc_n, ex["c_n"])
        g_c_h = L.silu_backward(g_sc_h, ex["c_h"])
        grads["stage_embed"][sh["stage"] - 1] += g_c_n.sum(axis=0)
        g_c = np.concatenate([g_c_n, g_c_h], axis=0)
        g_ta1, grads["t_mlp.w2"], grads["t_mlp.b2"] = L.linear_backward(g_c, ex["ta1"], p["t_mlp.w2"])
        g_th1 = L.silu_backward(g_ta1, ex["th1"])
        _, grads["t_mlp.w1"], grads["t_mlp.b1"] = L.linear_backward(g_th1, ex["e"], p["t_mlp.w1"])
        grads["text_proj.w"] = ex["text"].reshape(-1, cfg.text_dim).T @ g_txt.reshape(-1, d)

        # embeddings
        g_xn = g_x[:, :nn_]
        g_pn, grads["noisy_embed.w"], grads["noisy_embed.b"] = L.linear_backward(
            g_xn, ex["pn"], p["noisy_embed.w"])
        if ex["hist_patches"] is not None:
            off = nn_
            for i, pa in ex["hist_patches"]:
                nt = pa.shape[1]
                gh = g_x[:, off:off + nt]
                grads[f"hist_embed.{i}.w"] = pa.reshape(-1, pa.shape[-1]).T @ gh.reshape(-1, d)
                off += nt
        g_noisy = unpatchify(g_pn, cfg.patch, sh["noisy_shape"])
        return grads, g_noisy


def dit_forward(model: ToyDiT, noisy, history, text, lam, stage, taps=()):
    return model.forward(noisy, history, text, lam, stage, taps)


def dit_backward(model: ToyDiT, g_u, cache, g_taps=None):
    return model.backward(g_u, cache, g_taps)


# -- checkpoint container -------------------------------------------------

def save_checkpoint(params: dict, path) -> None:
    """Named-tensor container: magic, version, count, then (name, rank, dims, float64 payload) records."""
    chunks = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        _, version, count = struct.unpack_from("<4sII", buf, 0)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).copy()
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def check_params(params: dict, reference: dict) -> None:
    """Raise CheckpointError unless ``params`` has exactly the names and shapes of ``reference``."""
    missing = set(reference) - set(params)
    extra = set(params) - set(reference)
    if missing or extra:
        raise CheckpointError(f"checkpoint/config mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
    for k, v in reference.items():
        if params[k].shape != v.shape:
            raise CheckpointError(f"checkpoint/config mismatch on {k}: {params[k].shape} vs {v.shape}")

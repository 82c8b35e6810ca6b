"""Toy language model with a short-term cache and a continuous long-term memory.

Pre-norm transformer blocks; self-attention queries come from the current
segment while keys/values cover the cached previous states plus the segment
(causally masked within the segment).  A learned relative-position bias is
added to the attention logits.  When the long-term memory is enabled, the
same per-head queries also drive a continuous-attention read whose result is
summed with the self-attention context.  After each segment the layer input
rows are gated (width-3 convolution) and written to the memory with
gradients stopped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import memory as mem_mod
from .autodiff import Tensor
from .basis import make_basis
from .memory import AttentionRecord, LtmHeadParams, LtmParams, MemoryState, empty_memory


class ModelError(Exception):
    pass


class TrainingError(Exception):
    """Raised when a step produces a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class ModelConfig:
    vocab_size: int = 21
    num_layers: int = 2
    num_heads: int = 2
    embed_size: int = 64
    input_len: int = 64
    stm_len: int = 64
    basis_n: int = 64
    tau: float = 0.75
    sample_count: int = 0          # M; 0 means "use basis_n"
    sticky_bins: int = 50
    ridge_lam: float = 0.5
    kl_weight: float = 1e-5
    sigma0: float = 0.05
    gate_enabled: bool = True
    ltm_mode: str = "linspace"     # off | linspace | sticky
    ffn_hidden: int = 256
    basis_widths: tuple = (0.01, 0.05)
    kl_form: str = "paper"         # paper | standard
    gate_depthwise: bool = False
    ltm_shared_affine: bool = False
    grad_clip: float = 0.25

    def __post_init__(self):
        if self.embed_size % self.num_heads:
            raise ModelError("embed size must be divisible by the head count")
        if self.ltm_mode not in ("off", "linspace", "sticky"):
            raise ModelError(f"unknown ltm mode {self.ltm_mode!r}")
        if self.sigma0 <= 0:
            raise ModelError("sigma0 must be positive")

    @property
    def head_size(self) -> int:
        return self.embed_size // self.num_heads


@dataclass
class LayerState:
    stm: np.ndarray                       # (S, e) cached previous inputs, S <= stm_len
    mem: MemoryState = None
    record: AttentionRecord = None        # previous step's read locations


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    d = x - mu
    var = ad.tmean(d * d, axis=-1, keepdims=True)
    return d / ad.sqrt(var + eps) * gain + bias


def smoothing_gate(x: Tensor, w_prev: Tensor, w_cur: Tensor, w_next: Tensor,
                   bias: Tensor, depthwise: bool = False) -> Tensor:
    """sigmoid(conv(x)) * x with a width-3, stride-1, zero-padded convolution."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    length, width = x.shape
    zero = Tensor(np.zeros((1, width)))
    if length > 1:
        xprev = ad.concat([zero, x[:-1]], axis=0)
        xnext = ad.concat([x[1:], zero], axis=0)
    else:
        xprev = zero
        xnext = zero
    if depthwise:
        pre = xprev * w_prev + x * w_cur + xnext * w_next + bias
    else:
        pre = ad.matmul(xprev, w_prev) + ad.matmul(x, w_cur) + ad.matmul(xnext, w_next) + bias
    return ad.sigmoid(pre) * x


def self_attention(x_normed: Tensor, kv_normed: Tensor, wq: Tensor, wk: Tensor,
                   wv: Tensor, wr: Tensor, rel_bias: Tensor, num_heads: int):
    """Causal multi-head attention of the segment over [cache; segment].

    x_normed: (L, e) queries source; kv_normed: (S+L, e).  rel_bias: (H, Dmax)
    indexed by query-key distance.  Returns (context (L, e), per-head query
    tensors) so the caller can reuse the queries for the memory read.
    """
    length, width = x_normed.shape
    total = kv_normed.shape[0]
    cache_len = total - length
    num_h = num_heads
    d = width // num_h
    q = ad.matmul(x_normed, wq)
    k = ad.matmul(kv_normed, wk)
    v = ad.matmul(kv_normed, wv)
    qi = np.arange(length)[:, None] + cache_len
    kj = np.arange(total)[None, :]
    dist = qi - kj                                    # (L, S+L)
    mask = np.where(dist < 0, -1e30, 0.0)
    dist_idx = np.clip(dist, 0, rel_bias.shape[1] - 1).ravel()
    inv_sqrt_d = 1.0 / math.sqrt(d)
    heads, queries = [], []
    for h in range(num_h):
        sl = slice(h * d, (h + 1) * d)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        logits = ad.matmul(qh, ad.transpose(kh)) * inv_sqrt_d
        bias = ad.reshape(ad.take(rel_bias[h], dist_idx), (length, total))
        att = ad.softmax_rows(logits + bias + Tensor(mask))
        heads.append(ad.matmul(att, vh))
        queries.append(qh)
    return ad.matmul(ad.concat(heads, axis=1), wr), queries


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        e, d, hh = cfg.embed_size, cfg.head_size, cfg.num_heads
        scale = 0.02

        def p(name, shape, init=None):
            data = rng.normal(0.0, scale, shape) if init is None else init
            t = Tensor(data, requires_grad=True)
            self.params[name] = t
            return t

        self.embed = p("embed", (cfg.vocab_size, e))
        dmax = cfg.stm_len + cfg.input_len
        self.layers = []
        for li in range(cfg.num_layers):
            pre = f"layer{li}."
            layer = {
                "wq": p(pre + "wq", (e, e)),
                "wk": p(pre + "wk", (e, e)),
                "wv": p(pre + "wv", (e, e)),
                "wr": p(pre + "wr", (e, e)),
                "rel_bias": p(pre + "rel_bias", None, init=np.zeros((hh, dmax))),
                "ln1_g": p(pre + "ln1_g", None, init=np.ones(e)),
                "ln1_b": p(pre + "ln1_b", None, init=np.zeros(e)),
                "ln2_g": p(pre + "ln2_g", None, init=np.ones(e)),
                "ln2_b": p(pre + "ln2_b", None, init=np.zeros(e)),
                "ffn_w1": p(pre + "ffn_w1", (e, cfg.ffn_hidden)),
                "ffn_b1": p(pre + "ffn_b1", None, init=np.zeros((1, cfg.ffn_hidden))),
                "ffn_w2": p(pre + "ffn_w2", (cfg.ffn_hidden, e)),
                "ffn_b2": p(pre + "ffn_b2", None, init=np.zeros((1, e))),
            }
            if cfg.ltm_mode != "off":
                b_sig0 = _softplus_inv(cfg.sigma0 ** 2)
                heads = []
                shared = None
                for h in range(hh):
                    hp = pre + f"ltm.h{h}."
                    if cfg.ltm_shared_affine and shared is not None:
                        w_mu, b_mu, w_sig, b_sig = shared
                    else:
                        w_mu = p(hp + "w_mu", (cfg.basis_n, 1))
                        b_mu = p(hp + "b_mu", None, init=np.zeros((1, 1)))
                        w_sig = p(hp + "w_sigma", (cfg.basis_n, 1))
                        b_sig = p(hp + "b_sigma", None, init=np.full((1, 1), b_sig0))
                        shared = (w_mu, b_mu, w_sig, b_sig)
                    heads.append(LtmHeadParams(
                        w_key=p(hp + "w_key", (d, d)),
                        w_value=p(hp + "w_value", (d, d)),
                        w_mu=w_mu, b_mu=b_mu, w_sigma=w_sig, b_sigma=b_sig))
                layer["ltm"] = LtmParams(heads=heads, w_out=p(pre + "ltm.w_out", (e, e)))
            if cfg.gate_enabled:
                if cfg.gate_depthwise:
                    shape = (1, e)
                else:
                    shape = (e, e)
                layer["gate"] = (p(pre + "gate.w_prev", shape),
                                 p(pre + "gate.w_cur", shape),
                                 p(pre + "gate.w_next", shape),
                                 p(pre + "gate.bias", None, init=np.zeros((1, e))))
            self.layers.append(layer)
        self.ln_f_g = p("ln_f_g", None, init=np.ones(e))
        self.ln_f_b = p("ln_f_b", None, init=np.zeros(e))
        self.w_out = p("w_out", (e, cfg.vocab_size))
        self.b_out = p("b_out", None, init=np.zeros((1, cfg.vocab_size)))
        self.basis = make_basis(cfg.basis_n, cfg.basis_widths) if cfg.ltm_mode != "off" else None

    # -- state handling ------------------------------------------------------

    def init_states(self) -> list:
        cfg = self.cfg
        states = []
        for _ in range(cfg.num_layers):
            mem = None
            if cfg.ltm_mode != "off":
                mem = empty_memory(self.basis, cfg.embed_size, tau=cfg.tau,
                                  sample_count=cfg.sample_count, lam=cfg.ridge_lam)
            states.append(LayerState(stm=np.zeros((0, cfg.embed_size)), mem=mem))
        return states

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward -------------------------------------------------------------

    def forward(self, tokens, states, update_memory: bool = True,
                rng: np.random.Generator = None):
        """One segment.  Returns (logits, new_states, records, tracked_sigma2).

        tokens: int array (L,).  States are consumed as values; new states
        contain rolled caches and (optionally) updated memories, all detached.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.max(initial=0) >= cfg.vocab_size or tokens.min(initial=0) < 0:
            raise ModelError(f"token id out of range for vocab {cfg.vocab_size}")
        h = ad.take(self.embed, tokens)
        new_states, records, tracked_sig2 = [], [], []
        for layer, st in zip(self.layers, states):
            h_in = h
            cache = st.stm
            cache_len = cache.shape[0]
            if cache_len:
                kv_in = ad.concat([Tensor(cache), h], axis=0)
            else:
                kv_in = h
            normed = layer_norm(kv_in, layer["ln1_g"], layer["ln1_b"])
            x_normed = normed[cache_len:] if cache_len else normed
            z_t, queries = self_attention(
                x_normed, normed, layer["wq"], layer["wk"], layer["wv"],
                layer["wr"], layer["rel_bias"], cfg.num_heads)
            rec = None
            if cfg.ltm_mode != "off" and st.mem is not None and st.mem.update_count >= 1:
                z_ltm, rec, sig2 = mem_mod.ltm_attend(st.mem, queries, layer["ltm"])
                records.append(rec)
                tracked_sig2.extend(sig2)
                z = z_t + z_ltm
            else:
                z = z_t
            h = h_in + z
            h = h + self._ffn(layer_norm(h, layer["ln2_g"], layer["ln2_b"]), layer)
            # roll caches with gradients stopped
            h_in_det = h_in.data
            new_stm = np.concatenate([cache, h_in_det], axis=0)
            if new_stm.shape[0] > cfg.stm_len:
                new_stm = new_stm[-cfg.stm_len:] if cfg.stm_len else new_stm[:0]
            new_mem = st.mem
            if cfg.ltm_mode != "off" and update_memory:
                rows = h_in_det
                if cfg.gate_enabled:
                    g0, g1, g2, gb = layer["gate"]
                    rows = smoothing_gate(Tensor(rows), g0, g1, g2, gb,
                                          depthwise=cfg.gate_depthwise).data
                mode = cfg.ltm_mode
                sticky_rec = st.record
                if mode == "sticky" and sticky_rec is None:
                    mode = "linspace"
                new_mem = mem_mod.update(st.mem, rows, mode=mode, record=sticky_rec,
                                         rng=rng, num_bins=cfg.sticky_bins)
            new_states.append(LayerState(stm=new_stm, mem=new_mem,
                                         record=rec if rec is not None else st.record))
        h = layer_norm(h, self.ln_f_g, self.ln_f_b)
        logits = ad.matmul(h, self.w_out) + self.b_out
        return logits, new_states, records, tracked_sig2

    def _ffn(self, x, layer):
        hidden = ad.gelu(ad.matmul(x, layer["ffn_w1"]) + layer["ffn_b1"])
        return ad.matmul(hidden, layer["ffn_w2"]) + layer["ffn_b2"]


# -- losses ------------------------------------------------------------------


def nll_loss(logits: Tensor, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Cross entropy of next-token targets; `weights` masks positions."""
    targets = np.asarray(targets, dtype=np.intp)
    length, vocab = logits.shape
    if targets.shape[0] != length:
        raise ModelError("targets must align with logits rows")
    w = np.ones(length) if weights is None else np.asarray(weights, dtype=np.float64)
    pick = np.zeros((length, vocab))
    pick[np.arange(length), targets] = w
    total = ad.tsum(ad.log_softmax_rows(logits) * Tensor(pick)) * (-1.0)
    if reduction == "sum":
        return total
    denom = max(w.sum(), 1.0)
    return total * (1.0 / denom)


def kl_loss(tracked_sigma2, sigma0: float, form: str = "paper") -> Tensor:
    """Variance regularizer toward a fixed prior std.

    form "paper": 0.5 * (s2/s0^2 - log(s/s0) - 1); form "standard" is the
    Gaussian KL with log(s2/s0^2) inside.
    """
    if form not in ("paper", "standard"):
        raise ModelError(f"unknown kl form {form!r}")
    s0sq = sigma0 * sigma0
    total = Tensor(0.0)
    for s2 in tracked_sigma2:
        ratio = s2 * (1.0 / s0sq)
        logterm = ad.log(ratio)
        if form == "paper":
            term = (ratio - logterm * 0.5 - 1.0) * 0.5
        else:
            term = (ratio - logterm - 1.0) * 0.5
        total = total + ad.tsum(term)
    return total


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float, clip: float = 0.0):
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in self.params.items()}
        if clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                scale = clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            t.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Decays to exactly 0 at step == total_steps."""
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


def sequence_eval(model: Model, tokens, loss_mask, rng=None):
    """Teacher-forced pass: argmax predictions and summed NLL at masked positions.

    Returns (preds, nll_sum, count) where preds holds one predicted token per
    masked position, in sequence order.
    """
    cfg = model.cfg
    tokens = np.asarray(tokens, dtype=np.intp)
    mask = np.asarray(loss_mask, dtype=np.float64)
    states = model.init_states()
    seg = cfg.input_len
    preds = []
    nll_sum = 0.0
    count = 0
    for start in range(0, len(tokens) - 1, seg):
        chunk = tokens[start:start + seg]
        logits, states, _, _ = model.forward(chunk, states, rng=rng)
        tgt = tokens[start + 1:start + len(chunk) + 1]
        w = mask[start:start + len(tgt)]
        if w.sum() == 0:
            continue
        if len(tgt) < len(chunk):
            logits = logits[:len(tgt)]
        nll = nll_loss(logits, tgt, weights=w, reduction="sum")
        nll_sum += float(nll.data)
        count += int(w.sum())
        for p in np.nonzero(w > 0)[0]:
            preds.append(int(np.argmax(logits.data[p])))
    return np.array(preds, dtype=np.intp), nll_sum, count


# -- training ----------------------------------------------------------------


def sequence_loss(model: Model, tokens, loss_mask, rng=None, backward=True):
    """Run one full token sequence through segments, return (nll_sum, kl_sum, count).

    tokens: (T,) ids; loss_mask: (T,) 1 where predicting token t+1 counts.
    Gradients (if backward) accumulate into model params; caches/memories are
    remade fresh for the sequence.
    """
    cfg = model.cfg
    tokens = np.asarray(tokens, dtype=np.intp)
    mask = np.asarray(loss_mask, dtype=np.float64)
    states = model.init_states()
    seg = cfg.input_len
    nll_sum = 0.0
    kl_sum = 0.0
    count = 0
    for start in range(0, len(tokens) - 1, seg):
        chunk = tokens[start:start + seg]
        logits, states, _, sig2 = model.forward(chunk, states, rng=rng)
        # position p in chunk predicts tokens[start+p+1]
        tgt = tokens[start + 1:start + len(chunk) + 1]
        w = mask[start:start + len(tgt)]
        if len(tgt) < len(chunk):
            logits = logits[:len(tgt)]
        pieces = []
        if w.sum() > 0:
            nll = nll_loss(logits, tgt, weights=w, reduction="sum")
            nll_sum += float(nll.data)
            count += int(w.sum())
            pieces.append(nll)
        if sig2 and cfg.kl_weight != 0.0:
            kl = kl_loss(sig2, cfg.sigma0, cfg.kl_form)
            kl_sum += float(kl.data)
            pieces.append(kl * cfg.kl_weight)
        if pieces and backward:
            total = pieces[0]
            for extra in pieces[1:]:
                total = total + extra
            total.backward()
    return nll_sum, kl_sum, count


def train_step(model: Model, opt: Adam, batch, step: int, total_steps: int,
               base_lr: float, rng=None):
    """One optimizer step over a batch of (tokens, loss_mask) sequences."""
    model.zero_grad()
    nll_sum = kl_sum = 0.0
    count = 0
    for tokens, mask in batch:
        n, k, c = sequence_loss(model, tokens, mask, rng=rng, backward=True)
        nll_sum += n
        kl_sum += k
        count += c
    if not (math.isfinite(nll_sum) and math.isfinite(kl_sum)):
        dump = {k: float(np.abs(t.data).max()) for k, t in model.params.items()}
        raise TrainingError(f"non-finite loss at step {step}: nll={nll_sum} kl={kl_sum}",
                            dump=dump)
    if len(batch) > 1:
        inv = 1.0 / len(batch)
        for t in model.params.values():
            if t.grad is not None:
                t.grad *= inv
    lr = cosine_lr(base_lr, step, total_steps)
    opt.step(lr, clip=model.cfg.grad_clip)
    mean_nll = nll_sum / max(count, 1)
    total = mean_nll + model.cfg.kl_weight * kl_sum / max(count, 1)
    return {"step": step, "nll": mean_nll, "kl": kl_sum / max(count, 1),
            "total": total, "lr": lr, "tokens": count}


def greedy_decode(model: Model, prompt_tokens, num_steps: int, rng=None,
                  forbid=() ) -> np.ndarray:
    """Feed the prompt through segments, then generate greedily one token at a
    time.  Generated tokens are not written to the long-term memory (they are
    model output, not observed context); the short-term cache still rolls."""
    cfg = model.cfg
    tokens = np.asarray(prompt_tokens, dtype=np.intp)
    states = model.init_states()
    seg = cfg.input_len
    logits = None
    for start in range(0, len(tokens), seg):
        logits, states, _, _ = model.forward(tokens[start:start + seg], states, rng=rng)
    out = []
    for _ in range(num_steps):
        row = logits.data[-1].copy()
        for tok in forbid:
            row[tok] = -np.inf
        nxt = int(np.argmax(row))
        out.append(nxt)
        logits, states, _, _ = model.forward(np.array([nxt]), states,
                                             update_memory=False, rng=rng)
    return np.asarray(out, dtype=np.intp)

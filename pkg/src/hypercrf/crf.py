"""CRF over feature-map voxels with CNN potentials and mean-field decoding.

Nodes are the (x, y, z) voxels of the classifier feature map; edges follow
4-connectivity within each spectral slice. Unary costs are -log softmax of
a grid network's per-voxel scores; pairwise costs multiply a label
compatibility matrix with a per-edge K x K score table emitted by a second
grid network on concatenated endpoint features (optionally refined by the
deconvolution refiner). Two Gaussian kernels reweight each edge.

Training is piecewise: independent per-node and per-edge softmax
likelihoods, so no partition function is ever evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import FeatureMap, TrainingDivergedError
from .cube import LabelMap
from .layers import SgdConfig, log_softmax, sgd_step, softmax
from .network import (
    NetworkParams,
    NetworkSpec,
    grid_backward,
    grid_forward,
    init_network,
)
from .refiner import RefinerSpec, build_refiner, init_refiner, refine_backward, refine_forward
from .tensor import ShapeError, Tensor

ORACLE_LIMIT = 10**6


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

@dataclass
class CrfGraph:
    shape: tuple[int, int, int]        # (H, W, Z)
    features: np.ndarray               # (C, H, W, Z)
    num_labels: int
    edges_p: np.ndarray                # canonical: horizontal then vertical
    edges_q: np.ndarray
    n_horizontal: int
    labels: np.ndarray | None = None   # (H, W, Z) 0-based, for training graphs
    intensity: np.ndarray | None = None  # optional raw spectra per voxel

    @property
    def num_nodes(self) -> int:
        h, w, z = self.shape
        return h * w * z

    @property
    def num_edges(self) -> int:
        return self.edges_p.size


def build_graph(
    fm: FeatureMap | np.ndarray,
    num_labels: int,
    labels: np.ndarray | None = None,
    intensity: np.ndarray | None = None,
) -> CrfGraph:
    """One node per voxel, 4-connected edges within each spectral slice."""
    if num_labels < 2:
        raise ValueError(f"need at least 2 labels, got {num_labels}")
    values = fm.values if isinstance(fm, FeatureMap) else np.asarray(fm)
    if values.ndim != 4:
        raise ShapeError(f"feature grid must be (H, W, Z, C), got {values.shape}")
    h, w, z = values.shape[:3]
    idx = np.arange(h * w * z, dtype=np.int64).reshape(h, w, z)
    hp, hq = idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel()
    vp, vq = idx[:-1, :, :].ravel(), idx[1:, :, :].ravel()
    return CrfGraph(
        shape=(h, w, z),
        features=np.ascontiguousarray(np.moveaxis(values, 3, 0)),
        num_labels=num_labels,
        edges_p=np.concatenate([hp, vp]),
        edges_q=np.concatenate([hq, vq]),
        n_horizontal=hp.size,
        labels=labels,
        intensity=intensity,
    )


# ---------------------------------------------------------------------------
# Gaussian edge kernels
# ---------------------------------------------------------------------------

@dataclass
class KernelParams:
    """Two-kernel weights: spatial reach (theta_alpha per axis) and the joint
    spatial-spectral appearance term (theta_gamma over feature differences)."""

    w1: float = 1.0
    w2: float = 1.0
    theta_alpha: tuple[float, float] = (3.0, 3.0)
    theta_gamma: float = 1.0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be >= 0")
        if min(self.theta_alpha) <= 0 or self.theta_gamma <= 0:
            raise ValueError("theta parameters must be strictly positive")


def pair_kernel(spatial_delta, feature_delta, kp: KernelParams) -> float:
    """k1 + k2 for one voxel pair (scalar form of the per-edge weights)."""
    dx, dy = spatial_delta
    s = dx**2 / (2.0 * kp.theta_alpha[0] ** 2) + dy**2 / (2.0 * kp.theta_alpha[1] ** 2)
    f2 = float(np.sum(np.square(np.asarray(feature_delta, dtype=np.float64))))
    k1 = kp.w1 * np.exp(-s)
    k2 = kp.w2 * np.exp(-s - f2 / (2.0 * kp.theta_gamma**2))
    return float(k1 + k2)


def gaussian_edge_weights(graph: CrfGraph, kp: KernelParams) -> np.ndarray:
    """Per-edge k1 + k2 in the graph's canonical edge order."""
    if graph.intensity is not None:
        f = np.moveaxis(graph.intensity, 3, 0).astype(np.float64)
    else:
        f = graph.features.astype(np.float64)
    dh2 = np.square(f[:, :, :-1, :] - f[:, :, 1:, :]).sum(axis=0).ravel()
    dv2 = np.square(f[:, :-1, :, :] - f[:, 1:, :, :]).sum(axis=0).ravel()
    sh = 1.0 / (2.0 * kp.theta_alpha[1] ** 2)   # horizontal edges step along y
    sv = 1.0 / (2.0 * kp.theta_alpha[0] ** 2)
    tg = 2.0 * kp.theta_gamma**2
    kh = kp.w1 * np.exp(-sh) + kp.w2 * np.exp(-sh - dh2 / tg)
    kv = kp.w1 * np.exp(-sv) + kp.w2 * np.exp(-sv - dv2 / tg)
    return np.concatenate([kh, kv])


# ---------------------------------------------------------------------------
# potential networks
# ---------------------------------------------------------------------------

def potts_matrix(num_labels: int) -> np.ndarray:
    return (1.0 - np.eye(num_labels)).astype(np.float64)


@dataclass
class PotentialNets:
    num_labels: int
    unary_spec: NetworkSpec
    unary_params: NetworkParams
    pairwise_spec: NetworkSpec
    pairwise_params: NetworkParams
    mu: np.ndarray = None
    refiner_mode: str = "none"          # none | unary | pairwise
    refiner_spec: RefinerSpec | None = None
    refiner_params: list | None = None
    learn_mu: bool = False

    def __post_init__(self):
        k = self.num_labels
        if self.unary_spec.num_classes != k:
            raise ShapeError(
                f"unary head width {self.unary_spec.num_classes} != label count {k}"
            )
        if self.pairwise_spec.num_classes != k * k:
            raise ShapeError(
                f"pairwise head width {self.pairwise_spec.num_classes} != K^2 = {k * k}"
            )
        if self.mu is None:
            self.mu = potts_matrix(k)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.shape != (k, k) or not np.allclose(self.mu, self.mu.T):
            raise ValueError("label compatibility matrix must be symmetric K x K")
        if not np.allclose(np.diag(self.mu), 0.0):
            raise ValueError("label compatibility matrix must have a zero diagonal")
        if self.refiner_mode not in ("none", "unary", "pairwise"):
            raise ValueError(f"unknown refiner mode {self.refiner_mode!r}")


def build_potential_nets(
    num_labels: int,
    feature_channels: int,
    unary_spec: NetworkSpec,
    pairwise_spec: NetworkSpec,
    rng: np.random.Generator,
    refiner_mode: str = "none",
    zero: bool = False,
) -> PotentialNets:
    """Initialize unary/pairwise grid nets (+ mirrored refiner if a path pools)."""
    uparams = init_network(
        unary_spec, (feature_channels, 1, 1, 1), rng, "same", "grid", zero=zero
    )
    pparams = init_network(
        pairwise_spec, (2 * feature_channels, 1, 1, 1), rng, "same", "grid", zero=zero
    )
    rspec = rparams = None
    if refiner_mode == "pairwise" and pairwise_spec.pool_count():
        rspec = build_refiner(pairwise_spec, num_labels * num_labels)
        rparams = init_refiner(rspec)
    elif refiner_mode == "unary" and unary_spec.pool_count():
        rspec = build_refiner(unary_spec, num_labels)
        rparams = init_refiner(rspec)
    return PotentialNets(
        num_labels=num_labels,
        unary_spec=unary_spec,
        unary_params=uparams,
        pairwise_spec=pairwise_spec,
        pairwise_params=pparams,
        refiner_mode=refiner_mode,
        refiner_spec=rspec,
        refiner_params=rparams,
    )


def _unary_logits(graph: CrfGraph, nets: PotentialNets, keep: bool = False):
    fwd = grid_forward(nets.unary_spec, nets.unary_params, graph.features, "same")
    logits = fwd.logits
    rcaches = None
    if nets.refiner_mode == "unary" and nets.refiner_spec is not None:
        refined, rcaches = refine_forward(
            Tensor.from_array(logits, dtype=logits.dtype),
            fwd.pool_records,
            nets.refiner_spec,
            nets.refiner_params,
        )
        logits = refined.view()
    if logits.shape[1:] != graph.shape:
        raise ShapeError(
            f"unary logits grid {logits.shape[1:]} is not voxel-aligned with "
            f"graph {graph.shape}; pooled nets need the matching refiner mode"
        )
    return (logits, fwd, rcaches) if keep else (logits, None, None)


def unary_potentials(graph: CrfGraph, nets: PotentialNets) -> np.ndarray:
    """(M, K) table: -log softmax of the unary net's per-voxel scores."""
    logits, _, _ = _unary_logits(graph, nets)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite unary net output")
    lsm = log_softmax(np.moveaxis(logits, 0, -1).astype(np.float64))
    return -lsm.reshape(graph.num_nodes, graph.num_labels)


def _edge_grids(graph: CrfGraph):
    f = graph.features
    hx = np.concatenate([f[:, :, :-1, :], f[:, :, 1:, :]], axis=0)
    vx = np.concatenate([f[:, :-1, :, :], f[:, 1:, :, :]], axis=0)
    return hx, vx


def _pairwise_logits(graph: CrfGraph, nets: PotentialNets, keep: bool = False):
    """Per-orientation (logits, forward, refine caches); logits are (K^2, ., ., Z)."""
    out = []
    for grid in _edge_grids(graph):
        fwd = grid_forward(nets.pairwise_spec, nets.pairwise_params, grid, "same")
        logits = fwd.logits
        rcaches = None
        if nets.refiner_mode == "pairwise" and nets.refiner_spec is not None:
            refined, rcaches = refine_forward(
                Tensor.from_array(logits, dtype=logits.dtype),
                fwd.pool_records,
                nets.refiner_spec,
                nets.refiner_params,
            )
            logits = refined.view()
        if logits.shape[1:] != grid.shape[1:]:
            raise ShapeError(
                f"pairwise logits grid {logits.shape[1:]} is not edge-aligned with "
                f"{grid.shape[1:]}; pooled nets need the matching refiner mode"
            )
        out.append((logits, fwd if keep else None, rcaches if keep else None))
    return out


def pairwise_potentials(graph: CrfGraph, nets: PotentialNets) -> np.ndarray:
    """(N, K, K) tables: compatibility mu times the per-edge net score delta."""
    k = graph.num_labels
    tables = []
    for logits, _, _ in _pairwise_logits(graph, nets):
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite pairwise net output")
        delta = np.moveaxis(logits, 0, -1).reshape(-1, k, k)
        tables.append(delta)
    delta = np.concatenate(tables, axis=0).astype(np.float64)
    return nets.mu[None, :, :] * delta


# ---------------------------------------------------------------------------
# mean-field inference and the exact oracle
# ---------------------------------------------------------------------------

@dataclass
class MarginalField:
    q: np.ndarray  # (M, K), rows are probability vectors
    iterations_run: int = 0

    def __post_init__(self):
        sums = self.q.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("marginal rows must sum to 1")

    def argmax_labels(self) -> np.ndarray:
        return self.q.argmax(axis=1)


def mean_field_infer(
    graph: CrfGraph,
    phi: np.ndarray,
    psi: np.ndarray,
    kp: KernelParams,
    iterations: int = 10,
    tol: float = 1e-4,
) -> MarginalField:
    """Synchronous mean-field updates Q <- softmax(-phi - message)."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    k = gaussian_edge_weights(graph, kp)
    ep, eq = graph.edges_p, graph.edges_q
    phi = np.asarray(phi, dtype=np.float64)
    q = softmax(-phi)
    it = 0
    for it in range(1, iterations + 1):
        m = np.zeros_like(phi)
        if graph.num_edges:
            to_p = k[:, None] * np.einsum("nab,nb->na", psi, q[eq])
            to_q = k[:, None] * np.einsum("nab,na->nb", psi, q[ep])
            np.add.at(m, ep, to_p)
            np.add.at(m, eq, to_q)
        if not np.all(np.isfinite(m)):
            raise FloatingPointError(f"non-finite mean-field message at iteration {it}")
        q_new = softmax(-phi - m)
        tv = 0.5 * np.abs(q_new - q).sum(axis=1).max()
        q = q_new
        if tv < tol:
            break
    return MarginalField(q=q, iterations_run=it)


def labeling_energy(graph, phi, psi, kp: KernelParams, labeling) -> float:
    """Energy of one labeling: unary costs plus kernel-weighted pairwise costs."""
    labeling = np.asarray(labeling, dtype=np.intp)
    k = gaussian_edge_weights(graph, kp)
    e = phi[np.arange(graph.num_nodes), labeling].sum()
    if graph.num_edges:
        e += (k * psi[np.arange(graph.num_edges),
                      labeling[graph.edges_p], labeling[graph.edges_q]]).sum()
    return float(e)


def exact_infer_oracle(graph, phi, psi, kp: KernelParams):
    """Exhaustive enumeration: exact marginals and the MAP labeling (tiny graphs)."""
    m, k = graph.num_nodes, graph.num_labels
    total = k**m
    if total > ORACLE_LIMIT:
        raise ValueError(f"instance too large for enumeration: {k}^{m} labelings")
    kw = gaussian_edge_weights(graph, kp)
    ep, eq = graph.edges_p, graph.edges_q
    phi = np.asarray(phi, dtype=np.float64)
    energies = np.empty(total)
    marg = np.zeros((m, k))
    best_e, best_lab = np.inf, None
    chunk = 65536
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total))
        labs = np.stack(np.unravel_index(ids, (k,) * m), axis=1)  # (T, m)
        e = phi[np.arange(m)[None, :], labs].sum(axis=1)
        if graph.num_edges:
            e = e + (kw[None, :] * psi[np.arange(ep.size)[None, :],
                                       labs[:, ep], labs[:, eq]]).sum(axis=1)
        energies[ids] = e
        j = int(e.argmin())
        if e[j] < best_e:
            best_e, best_lab = float(e[j]), labs[j].copy()
    w = np.exp(-(energies - energies.min()))
    z = w.sum()
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total))
        labs = np.stack(np.unravel_index(ids, (k,) * m), axis=1)
        for p in range(m):
            marg[p] += np.bincount(labs[:, p], weights=w[ids], minlength=k)
    return marg / z, best_lab


# ---------------------------------------------------------------------------
# piecewise training
# ---------------------------------------------------------------------------

def _require_labels(graph: CrfGraph):
    if graph.labels is None:
        raise ValueError("training graph has no ground-truth labels")
    y = np.asarray(graph.labels)
    if y.shape != graph.shape:
        raise ShapeError(f"label grid {y.shape} != graph shape {graph.shape}")
    if y.min() < 0 or y.max() >= graph.num_labels:
        raise ValueError("voxel labels must lie in [0, K)")
    return y.astype(np.intp)


def _edge_targets(graph: CrfGraph, y: np.ndarray) -> np.ndarray:
    flat = y.ravel()
    return flat[graph.edges_p] * graph.num_labels + flat[graph.edges_q]


def piecewise_graph_loss(graph: CrfGraph, nets: PotentialNets, want_grads: bool = False):
    """Summed node and edge negative log likelihoods (and gradients).

    Nodes: -log softmax over K of the unary scores. Edges: -log softmax over
    K^2 of the negated pairwise cost table mu * delta. No partition function
    is ever computed.
    """
    y = _require_labels(graph)
    k = graph.num_labels
    grads = {"unary": None, "pairwise": None, "refiner": None, "mu": None}

    # node term
    ulogits, ufwd, urcaches = _unary_logits(graph, nets, keep=want_grads)
    lsm = log_softmax(np.moveaxis(ulogits, 0, -1).astype(np.float64))
    ix, iy, iz = np.indices(graph.shape, sparse=True)
    loss = float(-lsm[ix, iy, iz, y].sum())
    if want_grads:
        dnode = np.exp(lsm)
        onehot = np.zeros_like(dnode)
        onehot[ix, iy, iz, y] = 1.0
        glogits = np.moveaxis(dnode - onehot, -1, 0)
        if urcaches is not None:
            gref, rgrads = refine_backward(
                urcaches, Tensor.from_array(glogits, dtype=glogits.dtype),
                nets.refiner_spec, nets.refiner_params,
            )
            grads["refiner"] = rgrads
            glogits = gref.view()
        ugrads, _ = grid_backward(nets.unary_spec, nets.unary_params, ufwd.caches, glogits)
        grads["unary"] = ugrads

    # edge terms, horizontal then vertical
    targets = _edge_targets(graph, y)
    mu_flat = nets.mu.reshape(-1)
    offset = 0
    for logits, pfwd, prcaches in _pairwise_logits(graph, nets, keep=want_grads):
        n_e = int(np.prod(logits.shape[1:]))
        delta = np.moveaxis(logits, 0, -1).reshape(n_e, k * k).astype(np.float64)
        zed = -(mu_flat[None, :] * delta)
        lse = log_softmax(zed)
        t = targets[offset : offset + n_e]
        loss += float(-lse[np.arange(n_e), t].sum())
        if want_grads:
            dz = np.exp(lse)
            dz[np.arange(n_e), t] -= 1.0
            if nets.learn_mu:
                gmu = -(dz * delta).sum(axis=0).reshape(k, k)
                grads["mu"] = gmu if grads["mu"] is None else grads["mu"] + gmu
            ddelta = -(dz * mu_flat[None, :])
            gl = np.moveaxis(ddelta.reshape(*logits.shape[1:], k * k), -1, 0)
            if prcaches is not None:
                gref, rgrads = refine_backward(
                    prcaches, Tensor.from_array(gl, dtype=gl.dtype),
                    nets.refiner_spec, nets.refiner_params,
                )
                grads["refiner"] = (
                    rgrads if grads["refiner"] is None
                    else _acc_list(grads["refiner"], rgrads)
                )
                gl = gref.view()
            pgrads, _ = grid_backward(
                nets.pairwise_spec, nets.pairwise_params, pfwd.caches, gl
            )
            grads["pairwise"] = (
                pgrads if grads["pairwise"] is None
                else _acc_list(grads["pairwise"], pgrads)
            )
        offset += n_e
    return (loss, grads) if want_grads else loss


def _acc_list(a, b):
    return [
        {key: da[key] + db[key] for key in da} if da else {}
        for da, db in zip(a, b)
    ]


def _scale_list(a, s: float):
    return [{key: v * s for key, v in d.items()} if d else {} for d in a]


def piecewise_loss(graphs, nets: PotentialNets) -> float:
    """Total piecewise negative log likelihood over a set of graphs."""
    return float(sum(piecewise_graph_loss(g, nets) for g in graphs))


def piecewise_train(
    graph_batches: list[CrfGraph],
    nets: PotentialNets,
    sgd: SgdConfig,
    val_graphs: list[CrfGraph] | None = None,
):
    """SGD on the piecewise objective; returns (nets, per-epoch loss history)."""
    rng = np.random.default_rng(sgd.seed)
    history: list[tuple[float, float]] = []
    n = len(graph_batches)
    for epoch in range(sgd.epochs):
        order = rng.permutation(n)
        for i in range(0, n, sgd.batch_size):
            total_grads = None
            weight = 0
            for gi in order[i : i + sgd.batch_size]:
                g = graph_batches[gi]
                weight += g.num_nodes + g.num_edges
                _, grads = piecewise_graph_loss(g, nets, want_grads=True)
                if total_grads is None:
                    total_grads = grads
                else:
                    total_grads["unary"] = _acc_list(total_grads["unary"], grads["unary"])
                    total_grads["pairwise"] = _acc_list(total_grads["pairwise"], grads["pairwise"])
                    if grads["refiner"] is not None:
                        total_grads["refiner"] = (
                            grads["refiner"] if total_grads["refiner"] is None
                            else _acc_list(total_grads["refiner"], grads["refiner"])
                        )
                    if grads["mu"] is not None:
                        total_grads["mu"] = (
                            grads["mu"] if total_grads["mu"] is None
                            else total_grads["mu"] + grads["mu"]
                        )
            # per-(node+edge) normalization keeps the step size graph-size free
            scale = 1.0 / max(weight, 1)
            total_grads["unary"] = _scale_list(total_grads["unary"], scale)
            total_grads["pairwise"] = _scale_list(total_grads["pairwise"], scale)
            if total_grads["refiner"] is not None:
                total_grads["refiner"] = _scale_list(total_grads["refiner"], scale)
            if total_grads["mu"] is not None:
                total_grads["mu"] = total_grads["mu"] * scale
            nets.unary_params = NetworkParams(
                sgd_step(nets.unary_params.layers, total_grads["unary"], sgd)
            )
            nets.pairwise_params = NetworkParams(
                sgd_step(nets.pairwise_params.layers, total_grads["pairwise"], sgd)
            )
            if total_grads["refiner"] is not None:
                nets.refiner_params = sgd_step(
                    nets.refiner_params, total_grads["refiner"], sgd
                )
            if nets.learn_mu and total_grads["mu"] is not None:
                g = total_grads["mu"]
                g = 0.5 * (g + g.T)
                np.fill_diagonal(g, 0.0)
                nets.mu = nets.mu - sgd.learning_rate * g
        train_loss = piecewise_loss(graph_batches, nets)
        val_loss = piecewise_loss(val_graphs, nets) if val_graphs else float("nan")
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(f"piecewise loss diverged at epoch {epoch}")
        history.append((train_loss, val_loss))
    return nets, history


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def collapse_voxels(voxel_labels: np.ndarray, q: np.ndarray, shape) -> np.ndarray:
    """Majority vote across the spectral axis; ties broken by summed Q mass."""
    h, w, z = shape
    k = q.shape[1]
    vl = voxel_labels.reshape(h, w, z)
    counts = np.zeros((h, w, k))
    for c in range(k):
        counts[:, :, c] = (vl == c).sum(axis=2)
    qmass = q.reshape(h, w, z, k).sum(axis=2)
    score = np.where(counts == counts.max(axis=2, keepdims=True), qmass, -np.inf)
    return (score.argmax(axis=2) + 1).astype(np.uint16)


def segment(
    fm: FeatureMap,
    nets: PotentialNets,
    kp: KernelParams,
    iterations: int = 10,
) -> tuple[LabelMap, MarginalField]:
    """Full decode: graph, potentials, mean field, voxel argmax, pixel collapse."""
    graph = build_graph(fm, nets.num_labels)
    phi = unary_potentials(graph, nets)
    psi = pairwise_potentials(graph, nets)
    mf = mean_field_infer(graph, phi, psi, kp, iterations)
    labels = collapse_voxels(mf.argmax_labels(), mf.q, graph.shape)
    return LabelMap(labels), mf

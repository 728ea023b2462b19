"""End-to-end orchestration: sampling, augmentation, the two training stages,
kernel-parameter search, model persistence, and full-cube inference."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import FeatureMap, extract_feature_map, infer_cube, train_group_cnns
from .config import RunConfig, load_config, save_config
from .crf import (
    CrfGraph,
    KernelParams,
    PotentialNets,
    build_graph,
    build_potential_nets,
    collapse_voxels,
    mean_field_infer,
    pairwise_potentials,
    piecewise_train,
    segment,
    unary_potentials,
)
from .cube import HyperCube, LabelMap
from .layers import SgdConfig
from .network import (
    NetworkSpec,
    SoftmaxSpec,
    load_checkpoint,
    parse_layers,
    save_checkpoint,
)
from .pipeline import (
    AugmentConfig,
    BandGroupSet,
    LabeledPatch,
    extract_patches,
    fuse_virtual_sample,
    geometric_augment,
    split_band_groups,
)
from .refiner import load_refiner, save_refiner


def sample_training_pixels(truth: LabelMap, per_class: int, rng: np.random.Generator) -> LabelMap:
    """Sparse label map holding `per_class` seeded picks per class."""
    out = np.zeros_like(truth.labels)
    for cls in np.unique(truth.labels):
        if cls == 0:
            continue
        xs, ys = np.nonzero(truth.labels == cls)
        take = min(per_class, xs.size)
        sel = rng.choice(xs.size, size=take, replace=False)
        out[xs[sel], ys[sel]] = cls
    return LabelMap(out)


def augment_patches(
    patches: list[LabeledPatch], cfg: RunConfig, rng: np.random.Generator
) -> list[LabeledPatch]:
    """Virtual samples per class/group plus the 7 geometric variants."""
    aug_cfg = AugmentConfig(
        alpha_low=cfg.alpha_low,
        alpha_high=cfg.alpha_high,
        beta_sigma=cfg.beta_sigma,
        geometric=cfg.geometric,
    )
    by_key: dict[tuple[int, int], list[LabeledPatch]] = {}
    for p in patches:
        by_key.setdefault((p.group_index, p.label), []).append(p)
    out = list(patches)
    for key in sorted(by_key):
        members = by_key[key]
        for _ in range(cfg.virtual_per_class):
            i = int(rng.integers(len(members)))
            j = int(rng.integers(len(members)))
            out.append(fuse_virtual_sample(members[i], members[j], aug_cfg, rng))
    if cfg.geometric:
        for p in list(out):
            out.extend(geometric_augment(p))
    return out


def head(body: str, num_classes: int) -> NetworkSpec:
    """Append the softmax head of the given width to a layer body string."""
    layers = list(parse_layers(body + f", softmax:{num_classes}").layers)
    return NetworkSpec(tuple(layers))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, fm: FeatureMap) -> "Standardizer":
        v = fm.values.reshape(-1, fm.values.shape[-1]).astype(np.float64)
        std = v.std(axis=0)
        return cls(mean=v.mean(axis=0), std=np.where(std > 1e-8, std, 1.0))

    def apply(self, fm: FeatureMap) -> FeatureMap:
        vals = (fm.values.astype(np.float64) - self.mean) / self.std
        return FeatureMap(values=vals.astype(np.float32), provenance=fm.provenance)

    @classmethod
    def identity(cls, channels: int) -> "Standardizer":
        return cls(mean=np.zeros(channels), std=np.ones(channels))


def resolve_theta_gamma(cfg: RunConfig, fm: FeatureMap) -> float:
    if cfg.theta_gamma != "auto":
        return float(cfg.theta_gamma)
    spread = float(fm.values.max() - fm.values.min())
    return max(0.1 * spread, 1e-3)


def make_tiles(
    fm: FeatureMap,
    truth: LabelMap,
    num_classes: int,
    tile: int,
    count: int,
    rng: np.random.Generator,
) -> list[CrfGraph]:
    """Fully labeled training subgraphs cut from the feature map.

    Pixel labels broadcast across the spectral axis; tiles containing any
    unlabeled pixel are skipped.
    """
    h, w, z, _ = fm.values.shape
    tiles: list[CrfGraph] = []
    attempts = 0
    while len(tiles) < count and attempts < 200 * count:
        attempts += 1
        x = int(rng.integers(0, h - tile + 1))
        y = int(rng.integers(0, w - tile + 1))
        block = truth.labels[x : x + tile, y : y + tile]
        if (block == 0).any():
            continue
        labels = np.repeat((block.astype(np.int64) - 1)[:, :, None], z, axis=2)
        tiles.append(
            build_graph(fm.values[x : x + tile, y : y + tile], num_classes, labels=labels)
        )
    if len(tiles) < count:
        raise ValueError(
            f"could only place {len(tiles)}/{count} fully labeled {tile}x{tile} tiles"
        )
    return tiles


def _tile_accuracy(tiles: list[CrfGraph], nets: PotentialNets, kp: KernelParams,
                   iterations: int) -> float:
    correct = total = 0
    for g in tiles:
        phi = unary_potentials(g, nets)
        psi = pairwise_potentials(g, nets)
        mf = mean_field_infer(g, phi, psi, kp, iterations)
        pred = collapse_voxels(mf.argmax_labels(), mf.q, g.shape)
        truth = g.labels[:, :, 0] + 1
        correct += int((pred == truth).sum())
        total += pred.size
    return correct / max(total, 1)


def grid_search_kernel(
    cfg: RunConfig,
    nets: PotentialNets,
    val_tiles: list[CrfGraph],
    theta_gamma: float,
) -> KernelParams:
    """Small validation grid over (theta_alpha, w2); first best wins ties."""
    base = KernelParams(
        w1=cfg.w1, w2=cfg.w2,
        theta_alpha=(cfg.theta_alpha, cfg.theta_alpha),
        theta_gamma=theta_gamma,
    )
    if not cfg.grid_search or not val_tiles:
        return base
    best, best_acc = base, -1.0
    for ta in (cfg.theta_alpha / 2.0, cfg.theta_alpha, cfg.theta_alpha * 2.0):
        for w2 in (cfg.w2 / 4.0, cfg.w2, cfg.w2 * 4.0):
            cand = KernelParams(
                w1=cfg.w1, w2=w2, theta_alpha=(ta, ta), theta_gamma=theta_gamma
            )
            acc = _tile_accuracy(val_tiles, nets, cand, cfg.mf_iterations)
            if acc > best_acc + 1e-12:
                best, best_acc = cand, acc
    return best


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    cfg: RunConfig
    num_classes: int
    groups: BandGroupSet
    cls_spec: NetworkSpec
    cls_params: dict[int, object]
    nets: PotentialNets
    kp: KernelParams
    standardizer: Standardizer


def _fmt(values) -> str:
    return ",".join(f"{float(v):.9g}" for v in np.asarray(values).reshape(-1))


def _parse_floats(s: str) -> np.ndarray:
    return np.array([float(tok) for tok in s.split(",") if tok.strip()])


def save_model(out_dir, bundle: ModelBundle) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(bundle.cfg, out / "run.cfg")
    for gi in sorted(bundle.cls_params):
        a, b = bundle.groups.groups[gi]
        save_checkpoint(
            out / f"cls_group_{gi:03d}.hcnn",
            bundle.cls_spec,
            bundle.cls_params[gi],
            meta={"group": gi, "band_lo": a, "band_hi": b},
        )
    nets = bundle.nets
    save_checkpoint(out / "unary.hcnn", nets.unary_spec, nets.unary_params,
                    meta={"role": "unary"})
    save_checkpoint(out / "pairwise.hcnn", nets.pairwise_spec, nets.pairwise_params,
                    meta={"role": "pairwise"})
    if nets.refiner_spec is not None:
        save_refiner(out / "refiner.hcnn", nets.refiner_spec, nets.refiner_params)
    lines = [
        "[model]",
        f"num_classes = {bundle.num_classes}",
        f"num_groups = {len(bundle.groups)}",
        f"band_group_size = {bundle.groups.group_size}",
        f"patch_size = {bundle.cfg.patch_size}",
        f"padding = {bundle.cfg.cnn_padding}",
        f"refiner_mode = {nets.refiner_mode}",
        f"iterations = {bundle.cfg.mf_iterations}",
        f"w1 = {bundle.kp.w1:.9g}",
        f"w2 = {bundle.kp.w2:.9g}",
        f"theta_alpha_x = {bundle.kp.theta_alpha[0]:.9g}",
        f"theta_alpha_y = {bundle.kp.theta_alpha[1]:.9g}",
        f"theta_gamma = {bundle.kp.theta_gamma:.9g}",
        f"mu = {_fmt(nets.mu)}",
        f"feature_mean = {_fmt(bundle.standardizer.mean)}",
        f"feature_std = {_fmt(bundle.standardizer.std)}",
        "",
    ]
    (out / "model.cfg").write_text("\n".join(lines))


def load_model(model_dir) -> ModelBundle:
    out = Path(model_dir)
    cfg = load_config(out / "run.cfg")
    import configparser

    parser = configparser.ConfigParser()
    parser.read(out / "model.cfg")
    m = parser["model"]
    k = m.getint("num_classes")
    n_groups = m.getint("num_groups")
    cls_params: dict[int, object] = {}
    cls_spec = None
    for gi in range(n_groups):
        spec, params, _ = load_checkpoint(out / f"cls_group_{gi:03d}.hcnn")
        cls_spec = spec
        cls_params[gi] = params
    unary_spec, unary_params, _ = load_checkpoint(out / "unary.hcnn")
    pairwise_spec, pairwise_params, _ = load_checkpoint(out / "pairwise.hcnn")
    mu = _parse_floats(m.get("mu")).reshape(k, k)
    refiner_mode = m.get("refiner_mode")
    rspec = rparams = None
    if (out / "refiner.hcnn").exists():
        rspec, rparams = load_refiner(out / "refiner.hcnn")
    nets = PotentialNets(
        num_labels=k,
        unary_spec=unary_spec,
        unary_params=unary_params,
        pairwise_spec=pairwise_spec,
        pairwise_params=pairwise_params,
        mu=mu,
        refiner_mode=refiner_mode,
        refiner_spec=rspec,
        refiner_params=rparams,
    )
    kp = KernelParams(
        w1=m.getfloat("w1"),
        w2=m.getfloat("w2"),
        theta_alpha=(m.getfloat("theta_alpha_x"), m.getfloat("theta_alpha_y")),
        theta_gamma=m.getfloat("theta_gamma"),
    )
    standardizer = Standardizer(
        mean=_parse_floats(m.get("feature_mean")),
        std=_parse_floats(m.get("feature_std")),
    )
    return ModelBundle(
        cfg=cfg,
        num_classes=k,
        groups=split_band_groups(_bands_from_meta(out, n_groups), m.getint("band_group_size")),
        cls_spec=cls_spec,
        cls_params=cls_params,
        nets=nets,
        kp=kp,
        standardizer=standardizer,
    )


def _bands_from_meta(model_dir: Path, n_groups: int) -> int:
    _, _, meta = load_checkpoint(model_dir / f"cls_group_{n_groups - 1:03d}.hcnn")
    return int(meta["band_hi"])


def write_loss_csv(path, history: list[tuple[float, float]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(history, start=1):
            writer.writerow([i, f"{tr:.8g}", f"{va:.8g}"])


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def train_pipeline(
    cube: HyperCube,
    truth: LabelMap,
    cfg: RunConfig,
    seed: int,
    out_dir,
    say=lambda msg: None,
):
    """Both training stages; writes the model directory, loss CSVs and figures."""
    from .render import save_loss_figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    seeds = root.spawn(5)
    k = truth.num_classes()
    groups = split_band_groups(cube, cfg.band_group_size)

    say(f"sampling {cfg.samples_per_class} training pixels per class")
    pix_rng = np.random.default_rng(seeds[0])
    train_pixels = sample_training_pixels(truth, cfg.samples_per_class, pix_rng)
    patch = (cfg.patch_size, cfg.patch_size)
    patches = extract_patches(cube, train_pixels, groups, patch)
    patches = augment_patches(patches, cfg, np.random.default_rng(seeds[1]))
    say(f"training {len(groups)} band-group networks on {len(patches)} patches")

    cls_spec = head(cfg.cnn_layers, k)
    cls_sgd = SgdConfig(
        learning_rate=cfg.cnn_learning_rate,
        batch_size=cfg.cnn_batch_size,
        epochs=cfg.cnn_epochs,
        seed=int(seeds[2].generate_state(1)[0]),
    )
    params_map, cls_curves = train_group_cnns(
        patches, cls_spec, cls_sgd, cfg.cnn_padding, cfg.val_fraction
    )
    for gi, hist in cls_curves.items():
        write_loss_csv(out / f"loss_cls_group_{gi:03d}.csv", hist)
    save_loss_figure(
        {f"group {gi}": h for gi, h in cls_curves.items()},
        out / "loss_cls.png",
        "classification stage loss",
    )

    say("extracting the fused feature map")
    fm = extract_feature_map(cube, groups, params_map, cls_spec, patch, cfg.cnn_padding)
    standardizer = (
        Standardizer.fit(fm) if cfg.standardize_features
        else Standardizer.identity(fm.values.shape[-1])
    )
    fm_std = standardizer.apply(fm)
    theta_gamma = resolve_theta_gamma(cfg, fm_std)

    say("building training tiles and potential networks")
    tile_rng = np.random.default_rng(seeds[3])
    tiles = make_tiles(fm_std, truth, k, cfg.tile_size,
                       cfg.train_tiles + cfg.val_tiles, tile_rng)
    train_tiles, val_tiles = tiles[: cfg.train_tiles], tiles[cfg.train_tiles :]
    c_feat = fm_std.values.shape[-1]
    mode = cfg.refiner_mode
    unary_body = cfg.unary_layers_pooled if mode == "unary" else cfg.unary_layers
    pairwise_body = cfg.pairwise_layers_pooled if mode == "pairwise" else cfg.pairwise_layers
    nets = build_potential_nets(
        k, c_feat,
        head(unary_body, k),
        head(pairwise_body, k * k),
        np.random.default_rng(seeds[4]),
        refiner_mode=mode,
    )
    crf_sgd = SgdConfig(
        learning_rate=cfg.crf_learning_rate,
        batch_size=cfg.crf_batch_graphs,
        epochs=cfg.crf_epochs,
        seed=int(seeds[4].generate_state(2)[1]),
    )
    say(f"piecewise CRF training on {len(train_tiles)} tiles ({mode} refinement)")
    nets, crf_hist = piecewise_train(train_tiles, nets, crf_sgd, val_graphs=val_tiles)
    write_loss_csv(out / "loss_crf.csv", crf_hist)
    save_loss_figure({"piecewise": crf_hist}, out / "loss_crf.png", "CRF stage loss")

    kp = grid_search_kernel(cfg, nets, val_tiles, theta_gamma)
    bundle = ModelBundle(
        cfg=cfg, num_classes=k, groups=groups, cls_spec=cls_spec,
        cls_params=params_map, nets=nets, kp=kp, standardizer=standardizer,
    )
    save_model(out / "model", bundle)
    say(f"model written to {out / 'model'}")
    return bundle


def infer_pipeline(cube: HyperCube, bundle: ModelBundle, out_dir, say=lambda msg: None):
    """Classification + segmentation label maps, pixmaps and figures."""
    from .metrics import error_map  # noqa: F401  (re-exported convenience)
    from .cube import write_labels
    from .render import save_label_figure, render_label_map

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patch = (bundle.cfg.patch_size, bundle.cfg.patch_size)
    say("classifying pixels")
    cls_map, post, fm = infer_cube(
        cube, bundle.groups, bundle.cls_params, bundle.cls_spec,
        patch, bundle.cfg.cnn_padding,
    )
    fm_std = bundle.standardizer.apply(fm)
    say("running mean-field segmentation")
    seg_map, _ = segment(fm_std, bundle.nets, bundle.kp, bundle.cfg.mf_iterations)
    write_labels(cls_map, out / "classification.lbl")
    write_labels(seg_map, out / "segmentation.lbl")
    render_label_map(cls_map, out / "classification.ppm")
    render_label_map(seg_map, out / "segmentation.ppm")
    save_label_figure(cls_map, out / "classification.png", "CNN classification")
    save_label_figure(seg_map, out / "segmentation.png", "CRF segmentation")
    return cls_map, seg_map

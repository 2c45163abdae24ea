"""End-to-end site predictor: location in, objectives + score + importances out.

Two modes share the same score head. "twostage" predicts the objectives
with a first network stage; "lookup" replaces that stage with the exact
state-keyed table plus spatial interpolation.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from siterank.dataset import ObjectiveSpec, SiteTable
from siterank.predictor.lookup import LookupTable, PredictorError, build_lookup
from siterank.predictor.network import FeedForwardNet, Head, TrainConfig, TrainingHistory, TwoStageNet, train_network
from siterank.ranking import RankResult

MODES = ("twostage", "lookup")
MODEL_FORMAT_VERSION = 1

X_FEATURES = ("longitude", "latitude", "county_fips", "state_fips")


@dataclass
class Standardizer:
    """Column-wise mean/std transform with constant-column protection."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(mean=X.mean(axis=0), std=std)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) * self.std + self.mean


@dataclass
class SampleSet:
    """Aligned training arrays: location features, raw objectives, score + importances."""

    site_ids: list[str]
    x: np.ndarray  # (n, 4) lon, lat, county_fips, state_fips
    y1: np.ndarray  # (n, m) raw objective values
    y2: np.ndarray  # (n, 1 + m) siting metric then importances

    @property
    def n(self) -> int:
        return self.x.shape[0]


def assemble_samples(table: SiteTable, result: RankResult) -> SampleSet:
    """Join site rows with their sweep results by site id."""
    by_id = {sid: i for i, sid in enumerate(result.site_ids)}
    ids, xs, y1s, y2s = [], [], [], []
    for record in table.records:
        row = by_id.get(record.registry_id)
        if row is None:
            raise PredictorError(f"site {record.registry_id!r} has no sweep result")
        ids.append(record.registry_id)
        xs.append([record.longitude, record.latitude, record.county_fips, record.state_fips])
        y1s.append(record.raw_objectives)
        y2s.append(np.concatenate([[result.metric[row]], result.importance[row]]))
    return SampleSet(
        site_ids=ids,
        x=np.asarray(xs, dtype=np.float64),
        y1=np.asarray(y1s, dtype=np.float64),
        y2=np.asarray(y2s, dtype=np.float64),
    )


@dataclass
class PredictorConfig:
    """Architecture and loss weighting on top of the optimizer knobs."""

    mode: str = "lookup"
    hidden1: tuple[int, ...] = (32, 32)  # objective stage (twostage mode)
    hidden2: tuple[int, ...] = (32, 32)  # score stage / lookup head
    hidden_activation: str = "relu"
    weight_continuous: float = 1.0
    weight_binary: float = 1.0
    weight_score: float = 1.0
    test_fraction: float = 0.2
    neighbors: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise PredictorError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise PredictorError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


@dataclass
class SitePredictor:
    """Trained predictor bundle; inference is pure and thread-safe."""

    mode: str
    spec: ObjectiveSpec
    x_std: Standardizer
    yc_std: Standardizer  # continuous-objective standardizer (stage-internal scale)
    cont_idx: np.ndarray
    bin_idx: np.ndarray
    score_net: FeedForwardNet
    objective_net: FeedForwardNet | None = None  # twostage mode
    lookup: LookupTable | None = None  # lookup mode

    def _objectives_internal(self, xs: np.ndarray, x_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(raw objectives, stage-2 input representation) for a standardized batch."""
        if self.mode == "twostage":
            y1i = self.objective_net.forward(xs)
            n_cont = self.cont_idx.size
            raw = np.empty((xs.shape[0], self.spec.m))
            raw[:, self.cont_idx] = self.yc_std.inverse(y1i[:, :n_cont])
            raw[:, self.bin_idx] = y1i[:, n_cont:]
            return raw, y1i
        raw = np.stack([self.lookup.predict(x) for x in x_raw])
        return raw, self._internal_from_raw(raw)

    def _internal_from_raw(self, y1_raw: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [self.yc_std.transform(y1_raw[:, self.cont_idx]), y1_raw[:, self.bin_idx]], axis=1
        )

    def predict(self, x) -> tuple[np.ndarray, float, np.ndarray]:
        """Objectives (raw units), siting score, and importance vector for one location."""
        objectives, score, importance = self.predict_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return objectives[0], float(score[0]), importance[0]

    def predict_batch(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        xs = self.x_std.transform(X)
        objectives, y1i = self._objectives_internal(xs, X)
        y2 = self.score_net.forward(np.concatenate([xs, y1i], axis=1))
        return objectives, y2[:, 0], y2[:, 1:]


def _score_heads(m: int, weight_score: float) -> list[Head]:
    # The importance head normalizes to a nonnegative sum-to-one vector.
    return [
        Head("score", 1, activation="linear", loss="se", weight=weight_score),
        Head("importance", m, activation="softmax", loss="se", weight=weight_score),
    ]


def train_predictor(
    samples: SampleSet,
    spec: ObjectiveSpec,
    config: PredictorConfig,
    lookup: LookupTable | None = None,
) -> tuple[SitePredictor, TrainingHistory, dict]:
    """Fit a predictor on sweep-labelled samples.

    Returns the predictor, the loss history, and the train/test split
    indices (by sample position) used for any later evaluation.
    """
    if samples.n < 2:
        raise PredictorError(f"need at least 2 samples to train, got {samples.n}")
    if samples.y1.shape[1] != spec.m:
        raise PredictorError(f"samples carry {samples.y1.shape[1]} objectives, spec expects {spec.m}")
    if samples.y2.shape[1] != 1 + spec.m:
        raise PredictorError("y2 must hold the siting metric followed by one importance per objective")

    cont_idx = np.asarray(spec.continuous_columns(), dtype=int)
    bin_idx = np.asarray(spec.binary_columns(), dtype=int)
    bin_vals = samples.y1[:, bin_idx]
    if bin_idx.size and not np.isin(bin_vals, (0.0, 1.0)).all():
        raise PredictorError("binary objectives must be exactly 0 or 1 in training data")

    rng = np.random.default_rng(config.train.seed)
    perm = rng.permutation(samples.n)
    n_test = max(1, int(round(config.test_fraction * samples.n)))
    n_test = min(n_test, samples.n - 1)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    x_std = Standardizer.fit(samples.x[train_idx])
    yc_std = Standardizer.fit(samples.y1[train_idx][:, cont_idx]) if cont_idx.size else Standardizer(np.zeros(0), np.ones(0))
    xs = x_std.transform(samples.x)

    score_targets = {"score": samples.y2[:, :1], "importance": samples.y2[:, 1:]}
    score_heads = _score_heads(spec.m, config.weight_score)

    if config.mode == "twostage":
        obj_heads = [
            Head("objective_cont", max(cont_idx.size, 0), "linear", "se", config.weight_continuous)
            if cont_idx.size
            else None,
            Head("objective_bin", max(bin_idx.size, 0), "sigmoid", "bce", config.weight_binary)
            if bin_idx.size
            else None,
        ]
        obj_heads = [h for h in obj_heads if h is not None]
        stage1 = FeedForwardNet.create(4, config.hidden1, obj_heads, config.hidden_activation, seed=config.train.seed)
        stage2 = FeedForwardNet.create(
            4 + spec.m, config.hidden2, score_heads, config.hidden_activation, seed=config.train.seed + 1
        )
        model = TwoStageNet(stage1, stage2)
        targets = dict(score_targets)
        if cont_idx.size:
            targets["objective_cont"] = yc_std.transform(samples.y1[:, cont_idx])
        if bin_idx.size:
            targets["objective_bin"] = samples.y1[:, bin_idx]
        history = train_network(
            model,
            xs[train_idx],
            {k: v[train_idx] for k, v in targets.items()},
            config.train,
            X_val=xs[test_idx],
            targets_val={k: v[test_idx] for k, v in targets.items()},
        )
        predictor = SitePredictor(
            mode="twostage",
            spec=spec,
            x_std=x_std,
            yc_std=yc_std,
            cont_idx=cont_idx,
            bin_idx=bin_idx,
            score_net=stage2,
            objective_net=stage1,
        )
    else:
        if lookup is None:
            raise PredictorError("lookup mode requires a built LookupTable")
        head = FeedForwardNet.create(
            4 + spec.m, config.hidden2, score_heads, config.hidden_activation, seed=config.train.seed
        )
        y1_internal = np.concatenate([yc_std.transform(samples.y1[:, cont_idx]), samples.y1[:, bin_idx]], axis=1)
        head_in = np.concatenate([xs, y1_internal], axis=1)
        history = train_network(
            head,
            head_in[train_idx],
            {k: v[train_idx] for k, v in score_targets.items()},
            config.train,
            X_val=head_in[test_idx],
            targets_val={k: v[test_idx] for k, v in score_targets.items()},
        )
        predictor = SitePredictor(
            mode="lookup",
            spec=spec,
            x_std=x_std,
            yc_std=yc_std,
            cont_idx=cont_idx,
            bin_idx=bin_idx,
            score_net=head,
            lookup=lookup,
        )
    split = {"train_idx": train_idx.tolist(), "test_idx": test_idx.tolist()}
    return predictor, history, split


def _net_arrays(prefix: str, net: FeedForwardNet) -> dict[str, np.ndarray]:
    out = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}_W{i}"] = W
        out[f"{prefix}_b{i}"] = b
    return out


def _net_meta(net: FeedForwardNet) -> dict:
    return {
        "dims": net.dims,
        "hidden_activation": net.hidden_activation,
        "seed": net.seed,
        "heads": [
            {"name": h.name, "size": h.size, "activation": h.activation, "loss": h.loss, "weight": h.weight}
            for h in net.heads
        ],
    }


def _net_from_meta(meta: dict, arrays, prefix: str) -> FeedForwardNet:
    heads = [Head(**h) for h in meta["heads"]]
    net = FeedForwardNet(dims=list(meta["dims"]), heads=heads, hidden_activation=meta["hidden_activation"], seed=meta["seed"])
    n_layers = len(meta["dims"]) - 1
    net.weights = [np.asarray(arrays[f"{prefix}_W{i}"], dtype=np.float64) for i in range(n_layers)]
    net.biases = [np.asarray(arrays[f"{prefix}_b{i}"], dtype=np.float64) for i in range(n_layers)]
    return net


def save_predictor(path, predictor: SitePredictor) -> None:
    """Write the model as one self-describing .npz (version, scalers, layers, seed)."""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "mode": predictor.mode,
        "spec": predictor.spec.to_json_dict(),
        "score_net": _net_meta(predictor.score_net),
    }
    arrays: dict[str, np.ndarray] = {
        "x_mean": predictor.x_std.mean,
        "x_scale": predictor.x_std.std,
        "yc_mean": predictor.yc_std.mean,
        "yc_scale": predictor.yc_std.std,
        "cont_idx": predictor.cont_idx,
        "bin_idx": predictor.bin_idx,
    }
    arrays.update(_net_arrays("score", predictor.score_net))
    if predictor.mode == "twostage":
        meta["objective_net"] = _net_meta(predictor.objective_net)
        arrays.update(_net_arrays("objective", predictor.objective_net))
    else:
        lut = predictor.lookup
        meta["lookup"] = {"neighbors": lut.neighbors, "site_ids": lut.site_ids}
        arrays["lut_coords"] = lut.coords
        arrays["lut_rows"] = lut.rows
        arrays["lut_state_keys"] = np.asarray(sorted(lut.state_rows), dtype=np.int64)
        arrays["lut_state_rows"] = np.stack([lut.state_rows[k] for k in sorted(lut.state_rows)]) if lut.state_rows else np.zeros((0, 0))
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    _savez_reproducible(path, arrays)


def _savez_reproducible(path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps zip members with the current time, which breaks
    # byte-identical reruns; write the same layout with a fixed timestamp.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_predictor(path) -> SitePredictor:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["meta_json"]).decode())
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise PredictorError(f"unsupported model format version {meta.get('format_version')!r}")
    spec = ObjectiveSpec.from_json_dict(meta["spec"])
    predictor = SitePredictor(
        mode=meta["mode"],
        spec=spec,
        x_std=Standardizer(arrays["x_mean"], arrays["x_scale"]),
        yc_std=Standardizer(arrays["yc_mean"], arrays["yc_scale"]),
        cont_idx=np.asarray(arrays["cont_idx"], dtype=int),
        bin_idx=np.asarray(arrays["bin_idx"], dtype=int),
        score_net=_net_from_meta(meta["score_net"], arrays, "score"),
    )
    if meta["mode"] == "twostage":
        predictor.objective_net = _net_from_meta(meta["objective_net"], arrays, "objective")
    else:
        state_keys = arrays["lut_state_keys"].tolist()
        state_rows = {int(k): arrays["lut_state_rows"][i] for i, k in enumerate(state_keys)}
        predictor.lookup = LookupTable(
            spec=spec,
            site_ids=[str(s) for s in meta["lookup"]["site_ids"]],
            coords=np.asarray(arrays["lut_coords"], dtype=np.float64),
            rows=np.asarray(arrays["lut_rows"], dtype=np.float64),
            state_rows=state_rows,
            neighbors=int(meta["lookup"]["neighbors"]),
        )
    return predictor


def config_grid(
    layers1=range(1, 9),
    layers2=range(1, 9),
    neurons=(25, 100, 300, 600, 950, 1000),
    learning_rates=(1e-5, 1e-4, 2e-4, 1e-3),
) -> list[dict]:
    """Enumerate hyperparameter candidates; running the sweep is the caller's job."""
    grid = []
    for l1 in layers1:
        for l2 in layers2:
            for width in neurons:
                for lr in learning_rates:
                    grid.append({"hidden1": (width,) * l1, "hidden2": (width,) * l2, "learning_rate": lr})
    return grid


def fit_lookup_predictor(table: SiteTable, spec: ObjectiveSpec | None = None, neighbors: int = 3) -> LookupTable:
    """Convenience wrapper so callers need only the dataset artifacts."""
    return build_lookup(table, spec, neighbors=neighbors)

"""Protocol engine: client phases, cloud libraries, cross-client training,
aggregation, majority-vote inference and the averaging baseline."""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fedifl.datagen import (
    ClientDataset,
    DomainShiftSpec,
    FleetLayout,
    batch_iter,
    check_label_spaces,
    default_layout,
    synth_fleet,
)
from fedifl.io import atomic_write_text
from fedifl.losses import (
    LabeledFeatureBatch,
    adversarial_losses_from_logits,
    cct_loss,
    cross_entropy_grad,
    ficl_grad,
    fipl_grad,
    ipcl_loss,
    ipfg_loss,
    orthogonal_loss_grad,
    structural_similarity_grad,
)
from fedifl.messages import (
    AveragedModel,
    ClassifierEntry,
    GeneratorUpload,
    GlobalModelDistribution,
    LibraryDownload,
    LibraryEntry,
    LocalModelUpload,
    MessageBus,
    ModelUpload,
)
from fedifl.models import (
    ArchitectureConfig,
    ClientModelBundle,
    build_bundle,
    build_classifier,
    build_deep,
    build_generator,
    build_primary,
    generator_input,
    init_disentanglers,
    label_index,
    set_frozen,
)
from fedifl.nn import (
    Sequential,
    clip_grad_norm,
    decode_params,
    encode_params,
    sigmoid,
    softmax,
    step_network,
)

TASKS = {1: ((2, 3, 4), 1), 2: ((1, 3, 4), 2), 3: ((1, 2, 4), 3), 4: ((1, 2, 3), 4)}
ABLATIONS = ("ssim", "fic", "fip", "o")
_PHASE_CODE = {"ipcl": 1, "ipfg": 2, "cct": 3, "fedavg": 4, "model": 5}


class DivergenceError(RuntimeError):
    """Non-finite loss; ``snapshot`` describes where it happened."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


class PhaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class FedConfig:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig.desk)
    epochs: tuple[int, int, int] = (20, 30, 50)
    lrs: tuple[float, float, float] = (0.05, 0.5, 0.05)
    batch_size: int = 32
    n_train: int = 40
    n_heldout: int = 30
    layout: FleetLayout | None = None
    shift: DomainShiftSpec | None = None
    aggregate: str = "mean"
    orthogonal_form: str = "squared"
    include_own_generated: bool = True
    disable: frozenset = frozenset()
    fedavg_rounds: int = 1
    grad_clip: float | None = 5.0
    cache: bool = True

    def __post_init__(self):
        if self.aggregate not in ("mean", "sum"):
            raise ValueError(f"aggregate must be mean or sum, got {self.aggregate!r}")
        if self.orthogonal_form not in ("squared", "raw"):
            raise ValueError(f"orthogonal_form must be squared or raw, got {self.orthogonal_form!r}")
        unknown = set(self.disable) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation terms {sorted(unknown)}; valid: {list(ABLATIONS)}")
        if min(self.epochs) < 0 or min(self.lrs) <= 0 or self.fedavg_rounds < 1:
            raise ValueError("epochs must be >= 0, learning rates > 0, rounds >= 1")
        object.__setattr__(self, "disable", frozenset(self.disable))

    def fleet_layout(self) -> FleetLayout:
        return self.layout or default_layout()


# ---------------------------------------------------------------- clients

class ClientPhase(enum.IntEnum):
    IDLE = 0
    IPCL = 1
    IPFG = 2
    UPLOADED = 3
    CCT = 4
    MODEL_UPLOADED = 5
    DONE = 6


def phase_seed(seed: int, client: int, phase: str, extra: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, client, _PHASE_CODE[phase], extra])


class Client:
    """One source participant: private data, private networks, a phase."""

    def __init__(self, client_id: int, dataset: ClientDataset, bundle: ClientModelBundle, seed: int):
        self.client_id = client_id
        self.dataset = dataset
        self.bundle = bundle
        self.seed = seed
        self.phase = ClientPhase.IDLE
        self.history = [ClientPhase.IDLE]

    def advance(self, to: ClientPhase):
        if to != self.phase + 1:
            raise PhaseError(f"client {self.client_id}: cannot go from {self.phase.name} to {to.name}")
        self.phase = to
        self.history.append(to)

    def require(self, phase: ClientPhase, op: str):
        if self.phase != phase:
            raise PhaseError(f"client {self.client_id}: {op} needs phase {phase.name}, is {self.phase.name}")

    def rng(self, phase: str) -> np.random.Generator:
        return np.random.default_rng(phase_seed(self.seed, self.client_id, phase))

    def batch_seed(self, phase: str) -> int:
        return int(phase_seed(self.seed, self.client_id, phase, 1).generate_state(1)[0])


def _check_finite(value: float, **where):
    if not np.isfinite(value):
        raise DivergenceError("non-finite loss", {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                                                  for k, v in where.items()})


def _log_row(log, client, phase, epoch, **values):
    log.append({"client": client, "phase": phase, "epoch": epoch, **values})


def _update(nets, lr: float, clip: float | None):
    for net in nets:
        if clip is not None:
            clip_grad_norm(net, clip)
        step_network(net, lr)


def _mean_rows(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


# ---------------------------------------------------------------- intra-client phases

def run_ipcl(client: Client, dataset: ClientDataset, epochs: int, lr: float, use_ssim: bool = True,
             log: list | None = None, batch_size: int = 32,
             grad_clip: float | None = 5.0) -> ClientModelBundle:
    """Prototype contrastive training of the primary/deep extractors and local classifier."""
    client.require(ClientPhase.IDLE, "IPCL")
    b = client.bundle
    P, D, clf = b["P"].train(), b["D"].train(), b["local_clf"].train()
    index, space = b.local_index, b.label_space
    seed = client.batch_seed("ipcl")
    for epoch in range(epochs):
        rows = []
        for step, (xb, yb) in enumerate(batch_iter(dataset, batch_size, seed, epoch)):
            df = D(P(xb))
            ce, dlog = cross_entropy_grad(clf(df), yb, index)
            ddf = clf.backward(dlog.astype(df.dtype))
            ss = 0.0
            if use_ssim:
                ss, dss = structural_similarity_grad(df, yb, space)
                ddf = ddf + dss.astype(df.dtype)
            total = ipcl_loss(ss, ce)
            _check_finite(total, client=client.client_id, phase="ipcl", epoch=epoch, step=step,
                          ssim=ss, ce1=ce)
            P.backward(D.backward(ddf))
            _update((P, D, clf), lr, grad_clip)
            rows.append({"loss_total": total, "ssim": ss, "ce1": ce})
        if log is not None and rows:
            _log_row(log, client.client_id, "ipcl", epoch, **_mean_rows(rows))
    client.advance(ClientPhase.IPCL)
    return b


def run_ipfg(client: Client, dataset: ClientDataset, epochs: int, lr: float,
             log: list | None = None, batch_size: int = 32,
             grad_clip: float | None = 5.0) -> ClientModelBundle:
    """Conditional adversarial training of the generator against the identifier.

    The extractors and local classifier are frozen and kept in inference
    mode, so their parameters and running statistics stay bit-identical.
    """
    client.require(ClientPhase.IPCL, "IPFG")
    b = client.bundle
    set_frozen(b, ("P", "D", "local_clf"), True)
    P, D, clf = b["P"].eval(), b["D"].eval(), b["local_clf"].eval()
    G, I = b["G"].train(), b["I"].train()
    arch, index, space = b.arch, b.local_index, b.label_space
    rng = client.rng("ipfg")
    seed = client.batch_seed("ipfg")
    for epoch in range(epochs):
        rows = []
        for step, (xb, yb) in enumerate(batch_iter(dataset, batch_size, seed, epoch)):
            n = len(yb)
            real = P(xb)
            noise = rng.standard_normal((n, arch.noise_dim)).astype(real.dtype)
            fake = G(generator_input(yb, space, noise))
            # identifier update on real and generated primary features
            z = I(np.concatenate([real, fake]))
            _, loss_i, d_real, d_fake, _ = adversarial_losses_from_logits(z[:n], z[n:])
            I.backward(np.concatenate([d_real, d_fake]).astype(z.dtype))
            _update((I,), lr, grad_clip)
            # generator update: fool the identifier and stay classifiable
            zf = I(fake)
            loss_g, _, _, _, d_gen = adversarial_losses_from_logits(z[:n], zf)
            d_adv = I.backward(d_gen.astype(zf.dtype))
            ce2, dlog = cross_entropy_grad(clf(D(fake)), yb, index)
            d_ce = D.backward(clf.backward(dlog.astype(fake.dtype)))
            total = ipfg_loss(loss_g, ce2)
            _check_finite(total + loss_i, client=client.client_id, phase="ipfg", epoch=epoch, step=step,
                          adv_g=loss_g, adv_i=loss_i, ce2=ce2)
            G.backward(d_adv + d_ce)
            _update((G,), lr, grad_clip)
            rows.append({"loss_total": total, "adv_i": loss_i, "adv_g": loss_g, "ce2": ce2,
                         "id_fake": float(sigmoid(zf).mean())})
        if log is not None and rows:
            _log_row(log, client.client_id, "ipfg", epoch, **_mean_rows(rows))
    client.advance(ClientPhase.IPFG)
    return b


def upload_generator(client: Client) -> GeneratorUpload:
    client.require(ClientPhase.IPFG, "generator upload")
    msg = GeneratorUpload(client.client_id, client.bundle.label_space,
                          encode_params(client.bundle["G"].state()))
    client.advance(ClientPhase.UPLOADED)
    return msg


# ---------------------------------------------------------------- cloud

@dataclass
class CloudState:
    label_space_library: dict[int, tuple[int, ...]]
    generator_library: dict[int, bytes]
    aggregated: GlobalModelDistribution | None = None

    def download_for(self, client_id: int) -> LibraryDownload:
        return LibraryDownload(client_id, tuple(
            LibraryEntry(k, self.label_space_library[k], self.generator_library[k])
            for k in sorted(self.generator_library) if k != client_id
        ))


def cloud_gather(uploads, expected_clients=None) -> CloudState:
    spaces, gens = {}, {}
    for msg in uploads:
        if msg.client_id in gens:
            raise ValueError(f"duplicate upload from client {msg.client_id}")
        spaces[msg.client_id] = tuple(msg.label_space)
        gens[msg.client_id] = msg.generator
    if expected_clients is not None:
        missing = sorted(set(expected_clients) - set(gens))
        if missing:
            raise ValueError(f"no generator upload from clients {missing}")
    return CloudState(spaces, gens)


# ---------------------------------------------------------------- cross-client training

@dataclass(frozen=True)
class CCTOptions:
    disable: frozenset = frozenset()
    orthogonal_form: str = "squared"


def cct_objective(P: Sequential, DI: Sequential, DS: Sequential, gclf: Sequential, x, labels,
                  generated, global_index, opts: CCTOptions = CCTOptions(), backward: bool = True):
    """Cross-client loss on one local batch plus generated batches.

    ``generated`` is a list of ``(primary_features, labels)``. Local and
    generated features share one pass through each disentangler. With
    ``backward`` the gradients are left in the networks' ``grads``.
    Returns ``(total, components)``.
    """
    labels = np.asarray(labels)
    pf = P(x)
    B = len(labels)
    X = np.concatenate([pf] + [g for g, _ in generated])
    all_labels = np.concatenate([labels] + [np.asarray(y) for _, y in generated])
    bounds = np.cumsum([0, B] + [len(y) for _, y in generated])
    IF, SF = DI(X), DS(X)
    inv = [LabeledFeatureBatch(IF[a:b], all_labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    spe = [LabeledFeatureBatch(SF[a:b], all_labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    dIF = np.zeros(IF.shape)
    dSF = np.zeros(SF.shape)
    comp = {"fic": 0.0, "fip": 0.0, "o": 0.0}
    if "fic" not in opts.disable:
        comp["fic"], g = ficl_grad(inv, "mean", need_grad=backward)
        if backward:
            dIF += np.concatenate(g)
    if "fip" not in opts.disable:
        comp["fip"], gi, gs = fipl_grad(inv, spe, "mean", need_grad=backward)
        if backward:
            dIF += np.concatenate(gi)
            dSF += np.concatenate(gs)
    if "o" not in opts.disable:
        comp["o"], d_if, d_sf = orthogonal_loss_grad(IF[:B], SF[:B], opts.orthogonal_form, "mean")
        dIF[:B] += d_if
        dSF[:B] += d_sf
    comp["ce3"], dlog = cross_entropy_grad(gclf(IF), all_labels, global_index)
    total = cct_loss(comp["fic"], comp["fip"], comp["o"], comp["ce3"])
    if backward:
        dt = IF.dtype
        dIF = dIF.astype(dt) + gclf.backward(dlog.astype(dt))
        dX = DI.backward(dIF) + DS.backward(dSF.astype(dt))
        P.backward(dX[:B])
    return total, comp


def _library_generators(arch: ArchitectureConfig, library: LibraryDownload):
    out = []
    for e in library.entries:
        G = build_generator(arch, len(e.label_space), np.random.default_rng(0))
        G.load_state(decode_params(e.generator, dtype=arch.np_dtype))
        G.eval()
        G.frozen = True
        out.append((e.client_id, G, tuple(e.label_space)))
    return out


def run_cct(client: Client, dataset: ClientDataset, library: LibraryDownload, epochs: int, lr: float,
            opts: CCTOptions = CCTOptions(), include_own_generated: bool = True,
            expected_sources=None, log: list | None = None, batch_size: int = 32,
             grad_clip: float | None = 5.0) -> ClientModelBundle:
    """Disentangle invariant and specific features against other clients' generated features."""
    client.require(ClientPhase.UPLOADED, "CCT")
    if library.recipient != client.client_id:
        raise ValueError(f"library addressed to {library.recipient}, not {client.client_id}")
    if expected_sources is not None:
        have = {e.client_id for e in library.entries} | {client.client_id}
        missing = sorted(set(expected_sources) - have)
        if missing:
            raise ValueError(f"library lacks generators of clients {missing}")
    b = client.bundle
    init_disentanglers(b)
    set_frozen(b, ("P", "DI", "DS", "global_clf"), False)
    set_frozen(b, ("D", "local_clf", "G", "I"), True)
    arch = b.arch
    gens = _library_generators(arch, library)
    if include_own_generated:
        gens.append((client.client_id, b["G"].eval(), b.label_space))
        gens.sort(key=lambda t: t[0])
    P, DI, DS, gclf = b["P"].train(), b["DI"].train(), b["DS"].train(), b["global_clf"].train()
    gindex = b.global_index
    rng = client.rng("cct")
    seed = client.batch_seed("cct")
    for epoch in range(epochs):
        rows = []
        for step, (xb, yb) in enumerate(batch_iter(dataset, batch_size, seed, epoch)):
            generated = []
            for _, G, space in gens:
                y = rng.choice(np.asarray(space), size=len(yb))
                noise = rng.standard_normal((len(yb), arch.noise_dim)).astype(arch.np_dtype)
                generated.append((G(generator_input(y, space, noise)), y))
            total, comp = cct_objective(P, DI, DS, gclf, xb, yb, generated, gindex, opts)
            _check_finite(total, client=client.client_id, phase="cct", epoch=epoch, step=step, **comp)
            _update((P, DI, DS, gclf), lr, grad_clip)
            rows.append({"loss_total": total, **comp})
        if log is not None and rows:
            _log_row(log, client.client_id, "cct", epoch, **_mean_rows(rows))
    client.advance(ClientPhase.CCT)
    return b


def upload_model(client: Client) -> ModelUpload:
    client.require(ClientPhase.CCT, "model upload")
    b = client.bundle
    msg = ModelUpload(client.client_id, *(encode_params(b[k].state()) for k in ("P", "DI", "DS", "global_clf")))
    client.advance(ClientPhase.MODEL_UPLOADED)
    return msg


# ---------------------------------------------------------------- aggregation and inference

def average_states(states, mode: str = "mean") -> dict[str, np.ndarray]:
    """Element-wise mean (or sum) of equally shaped parameter dicts."""
    states = list(states)
    if not states:
        raise ValueError("nothing to aggregate")
    ref = {k: v.shape for k, v in states[0].items()}
    for i, s in enumerate(states[1:], 1):
        got = {k: v.shape for k, v in s.items()}
        if got != ref:
            diff = sorted(k for k in set(ref) | set(got) if ref.get(k) != got.get(k))
            raise ValueError(f"architecture mismatch in upload {i}: {diff}")
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    scale = 1.0 / len(states) if mode == "mean" else 1.0
    out = {}
    for k in ref:
        acc = np.sum([s[k].astype(np.float64) for s in states], axis=0) * scale
        out[k] = acc.astype(states[0][k].dtype)
    return out


def aggregate(uploads, mode: str = "mean", global_space=None) -> GlobalModelDistribution:
    """Average extractors across clients; pass every global classifier through."""
    uploads = sorted(uploads, key=lambda m: m.client_id)
    ids = [m.client_id for m in uploads]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model uploads: {ids}")
    blobs = {}
    for key in ("primary", "invariant", "specific"):
        states = [decode_params(getattr(m, key)) for m in uploads]
        blobs[key] = encode_params(average_states(states, mode))
    space = tuple(global_space) if global_space is not None else ()
    clfs = tuple(ClassifierEntry(m.client_id, space, m.global_classifier) for m in uploads)
    return GlobalModelDistribution(blobs["primary"], blobs["invariant"], blobs["specific"], clfs)


def majority_vote(probs, classes):
    """``probs`` is (voters, N, C). Returns ``(labels, tallies)``.

    Modal argmax wins; ties go to the largest summed probability, then the
    lowest label.
    """
    probs = np.asarray(probs)
    classes = np.asarray(classes)
    votes = probs.argmax(axis=2)
    summed = probs.sum(axis=0)
    preds, tallies = [], []
    for n in range(probs.shape[1]):
        counts = np.bincount(votes[:, n], minlength=len(classes))
        tied = np.flatnonzero(counts == counts.max())
        best = tied[0]
        for c in tied[1:]:
            if summed[n, c] > summed[n, best]:
                best = c
        preds.append(int(classes[best]))
        tallies.append({int(classes[c]): int(counts[c]) for c in np.flatnonzero(counts)})
    return np.array(preds, dtype=np.int64), tallies


@dataclass
class GlobalModel:
    primary: Sequential
    invariant: Sequential
    classifiers: dict[int, Sequential]
    global_space: tuple[int, ...]

    @classmethod
    def from_distribution(cls, arch: ArchitectureConfig, dist: GlobalModelDistribution, global_space):
        rng = np.random.default_rng(0)
        dt = arch.np_dtype
        P = build_primary(arch, rng).load_state(decode_params(dist.primary, dt)).eval()
        DI = build_deep(arch, rng).load_state(decode_params(dist.invariant, dt)).eval()
        clfs = {}
        for e in dist.classifiers:
            net = build_classifier(arch, len(global_space), rng)
            clfs[e.client_id] = net.load_state(decode_params(e.classifier, dt)).eval()
        return cls(P, DI, clfs, tuple(global_space))

    def probabilities(self, x) -> np.ndarray:
        feats = self.invariant(self.primary(x))
        return np.stack([softmax(self.classifiers[k](feats), axis=1) for k in sorted(self.classifiers)])


def infer_majority_vote(model: GlobalModel, x, batch: int = 256):
    preds, tallies = [], []
    for s in range(0, len(x), batch):
        p, t = majority_vote(model.probabilities(x[s:s + batch]), model.global_space)
        preds.append(p)
        tallies += t
    return np.concatenate(preds), tallies


def _predict(nets, x, batch: int = 256):
    out = []
    for s in range(0, len(x), batch):
        h = x[s:s + batch]
        for net in nets:
            h = net(h)
        out.append(h.argmax(axis=1))
    return np.concatenate(out)


def _accuracy(nets, dataset: ClientDataset, space) -> float:
    for net in nets:
        net.eval()
    cols = np.array(sorted(space))
    pred = cols[_predict(nets, dataset.signals)]
    return float((pred == dataset.labels).mean())


# ---------------------------------------------------------------- reports

@dataclass
class TaskReport:
    task: int
    method: str
    seed: int
    source_clients: list[int]
    target_client: int
    disabled: list[str]
    per_phase_losses: list[dict]
    per_client_train_acc: dict[int, float]
    target_acc: float
    vote_tallies: dict
    bytes_per_phase: dict[str, int]
    target_accesses: dict[str, int]
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_client_train_acc"] = {str(k): v for k, v in self.per_client_train_acc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replay_view(self) -> dict:
        """Everything except wall-clock time; equal for replays of one seed."""
        d = self.to_dict()
        d.pop("wall_time_s")
        return d

    def loss_csv(self) -> str:
        comps = sorted({k for r in self.per_phase_losses for k in r} - {"client", "phase", "epoch", "loss_total"})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "phase", "client", "loss_total", *comps])
        for r in self.per_phase_losses:
            w.writerow([r["epoch"], r["phase"], r["client"], repr(r["loss_total"]),
                        *[repr(r[c]) if c in r else "" for c in comps]])
        return buf.getvalue()

    def write(self, directory, stem: str | None = None):
        from pathlib import Path

        stem = stem or f"task{self.task}_{self.method}_s{self.seed}"
        directory = Path(directory)
        return (atomic_write_text(directory / f"{stem}.json", self.to_json()),
                atomic_write_text(directory / f"{stem}_losses.csv", self.loss_csv()))


def _vote_summary(preds, tallies, n_voters) -> dict:
    predicted = Counter(int(p) for p in preds)
    agreement = Counter()
    for t in tallies:
        top = max(t.values())
        if top == n_voters:
            agreement["unanimous"] += 1
        elif list(t.values()).count(top) > 1:
            agreement["tie"] += 1
        else:
            agreement["majority"] += 1
    return {"predicted": {str(k): v for k, v in sorted(predicted.items())},
            "agreement": {k: agreement.get(k, 0) for k in ("unanimous", "majority", "tie")}}


# ---------------------------------------------------------------- task orchestration

def task_assignment(task_id: int) -> tuple[tuple[int, ...], int]:
    if task_id not in TASKS:
        raise ValueError(f"task id must be one of {sorted(TASKS)}, got {task_id}")
    return TASKS[task_id]


def model_seed(seed: int) -> int:
    """Seed shared by all clients so their networks start from one initialisation."""
    return int(np.random.SeedSequence([seed, 0, _PHASE_CODE["model"]]).generate_state(1)[0])


def _task_data(task_id: int, cfg: FedConfig, seed: int):
    layout = cfg.fleet_layout()
    sources, target = task_assignment(task_id)
    missing = [c for c in (*sources, target) if c not in layout.clients]
    if missing:
        raise ValueError(f"layout has no clients {missing}")
    check_label_spaces({k: layout.label_space(k) for k in sources}, f"task {task_id} sources: ")
    L = cfg.arch.input_length
    train = synth_fleet(layout, cfg.shift, cfg.n_train, L, seed, clients=sources)
    target_ds = synth_fleet(layout, cfg.shift, cfg.n_heldout, L, seed, start_index=cfg.n_train,
                            clients=[target])[target]
    return layout, sources, target, train, target_ds


_INTRA_CACHE: dict[str, tuple] = {}


def clear_intra_cache():
    _INTRA_CACHE.clear()


def _intra_key(client: Client, cfg: FedConfig, use_ssim: bool) -> str:
    return repr((client.client_id, client.seed, cfg.arch, cfg.epochs[:2], cfg.lrs[:2], cfg.batch_size, cfg.grad_clip,
                 cfg.n_train, cfg.layout, cfg.shift, use_ssim, client.bundle.global_space))


def _intra_client(client: Client, cfg: FedConfig, log: list):
    """IPCL then IPFG; results are memoised per client, seed and settings."""
    use_ssim = "ssim" not in cfg.disable
    key = _intra_key(client, cfg, use_ssim)
    ids = ("P", "D", "local_clf", "G", "I")
    if cfg.cache and key in _INTRA_CACHE:
        states, rows = _INTRA_CACHE[key]
        for k in ids:
            client.bundle[k].load_state(states[k])
        set_frozen(client.bundle, ("P", "D", "local_clf"), True)
        client.advance(ClientPhase.IPCL)
        client.advance(ClientPhase.IPFG)
        log.extend(dict(r) for r in rows)
        return
    start = len(log)
    run_ipcl(client, client.dataset, cfg.epochs[0], cfg.lrs[0], use_ssim, log, cfg.batch_size, cfg.grad_clip)
    run_ipfg(client, client.dataset, cfg.epochs[1], cfg.lrs[1], log, cfg.batch_size, cfg.grad_clip)
    if cfg.cache:
        _INTRA_CACHE[key] = (client.bundle.snapshot(ids), [dict(r) for r in log[start:]])


def _make_clients(cfg, sources, layout, train, global_space, seed):
    clients = {}
    for k in sources:
        bundle = build_bundle(cfg.arch, layout.label_space(k), global_space, model_seed(seed))
        clients[k] = Client(k, train[k], bundle, seed)
    return clients


def run_task(task_id: int, cfg: FedConfig = FedConfig(), seed: int = 0) -> TaskReport:
    """All five phases for one task; the target client only meets the final model."""
    return run_task_detailed(task_id, cfg, seed)[0]


def run_task_detailed(task_id: int, cfg: FedConfig = FedConfig(), seed: int = 0):
    """``run_task`` that also returns the clients, the global model and the target data."""
    t0 = time.perf_counter()
    layout, sources, target, train, target_ds = _task_data(task_id, cfg, seed)
    global_space = layout.global_space(sources)
    clients = _make_clients(cfg, sources, layout, train, global_space, seed)
    bus = MessageBus()
    log: list[dict] = []
    accesses = {}
    for k in sources:
        _intra_client(clients[k], cfg, log)
    accesses["intra"] = target_ds.accesses
    uploads = [bus.send(upload_generator(clients[k]), "generator_upload", f"client{k}", "cloud")
               for k in sources]
    cloud = cloud_gather(uploads, sources)
    opts = CCTOptions(cfg.disable, cfg.orthogonal_form)
    models = []
    for k in sources:
        lib = bus.send(cloud.download_for(k), "library_download", "cloud", f"client{k}")
        run_cct(clients[k], clients[k].dataset, lib, cfg.epochs[2], cfg.lrs[2], opts,
                cfg.include_own_generated, sources, log, cfg.batch_size, cfg.grad_clip)
        models.append(bus.send(upload_model(clients[k]), "model_upload", f"client{k}", "cloud"))
    accesses["cct"] = target_ds.accesses
    cloud.aggregated = aggregate(models, cfg.aggregate, global_space)
    dist = bus.send(cloud.aggregated, "model_distribution", "cloud", f"client{target}")
    accesses["aggregate"] = target_ds.accesses
    train_acc = {}
    for k in sources:
        b = clients[k].bundle
        train_acc[k] = _accuracy([b["P"], b["DI"], b["global_clf"]], clients[k].dataset, global_space)
        clients[k].advance(ClientPhase.DONE)
    model = GlobalModel.from_distribution(cfg.arch, dist, global_space)
    preds, tallies = infer_majority_vote(model, target_ds.signals)
    accesses["inference"] = target_ds.accesses
    disabled = sorted(cfg.disable)
    report = TaskReport(
        task=task_id, method="fedifl" if not disabled else "fedifl-no-" + "-".join(disabled), seed=seed,
        source_clients=list(sources), target_client=target, disabled=disabled,
        per_phase_losses=log, per_client_train_acc=train_acc,
        target_acc=float((preds == target_ds.labels).mean()),
        vote_tallies=_vote_summary(preds, tallies, len(sources)),
        bytes_per_phase=bus.bytes_per_phase(), target_accesses=accesses,
        wall_time_s=time.perf_counter() - t0,
    )
    return report, clients, model, target_ds


def ablation(task_id: int, disable, cfg: FedConfig = FedConfig(), seed: int = 0) -> TaskReport:
    disable = frozenset(disable)
    unknown = disable - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation terms {sorted(unknown)}; valid: {list(ABLATIONS)}")
    return run_task(task_id, replace(cfg, disable=disable), seed)


# ---------------------------------------------------------------- averaging baseline

_FEDAVG_NETS = ("P", "D", "global_clf")


def _flat_state(bundle) -> dict[str, np.ndarray]:
    return {f"{k}/{n}": v for k in _FEDAVG_NETS for n, v in bundle[k].state().items()}


def _load_flat(bundle, flat):
    for k in _FEDAVG_NETS:
        bundle[k].load_state({n.split("/", 1)[1]: v for n, v in flat.items() if n.startswith(k + "/")})


def train_local_classifier(bundle, dataset, epochs, lr, batch_size, seed, log=None, client=0, round_=0,
                           grad_clip: float | None = 5.0):
    """Plain cross-entropy over the global label space (baseline local step)."""
    P, D, clf = bundle["P"].train(), bundle["D"].train(), bundle["global_clf"].train()
    index = bundle.global_index
    for epoch in range(epochs):
        rows = []
        for step, (xb, yb) in enumerate(batch_iter(dataset, batch_size, seed, epoch)):
            ce, dlog = cross_entropy_grad(clf(D(P(xb))), yb, index)
            _check_finite(ce, client=client, phase="fedavg", round=round_, epoch=epoch, step=step)
            P.backward(D.backward(clf.backward(dlog.astype(xb.dtype))))
            _update((P, D, clf), lr, grad_clip)
            rows.append({"loss_total": ce, "ce": ce})
        if log is not None and rows:
            _log_row(log, client, "fedavg", epoch, round=round_, **_mean_rows(rows))


def fedavg_local_epochs(cfg: FedConfig) -> int:
    """Same optimisation budget as the two representation-learning phases."""
    return max(1, (cfg.epochs[0] + cfg.epochs[2]) // cfg.fedavg_rounds)


def run_fedavg_baseline(task_id: int, cfg: FedConfig = FedConfig(), seed: int = 0,
                        sources=None) -> TaskReport:
    """Local cross-entropy training, cloud-side averaging of every parameter."""
    return run_fedavg_detailed(task_id, cfg, seed, sources)[0]


def run_fedavg_detailed(task_id: int, cfg: FedConfig = FedConfig(), seed: int = 0, sources=None):
    """Baseline run returning ``(report, averaged_state, local_bundles)``."""
    t0 = time.perf_counter()
    layout, task_sources, target, train, target_ds = _task_data(task_id, cfg, seed)
    sources = tuple(task_sources if sources is None else sources)
    global_space = layout.global_space(task_sources)
    bundles = {k: build_bundle(cfg.arch, layout.label_space(k), global_space, model_seed(seed)) for k in sources}
    bus = MessageBus()
    log: list[dict] = []
    global_state = None
    accesses = {}
    local_epochs = fedavg_local_epochs(cfg)
    for r in range(cfg.fedavg_rounds):
        uploads = []
        for k in sources:
            if global_state is not None:
                _load_flat(bundles[k], global_state)
            seed_k = int(phase_seed(seed, k, "fedavg", r).generate_state(1)[0])
            train_local_classifier(bundles[k], train[k], local_epochs, cfg.lrs[0], cfg.batch_size,
                                   seed_k, log, k, r, cfg.grad_clip)
            msg = LocalModelUpload(k, encode_params(_flat_state(bundles[k])))
            uploads.append(bus.send(msg, "model_upload", f"client{k}", "cloud"))
        avg = average_states([decode_params(m.model) for m in uploads], cfg.aggregate)
        global_state = decode_params(
            bus.send(AveragedModel(encode_params(avg)), "model_distribution", "cloud", "clients").model,
            cfg.arch.np_dtype)
        accesses[f"round{r}"] = target_ds.accesses
    train_acc = {k: _accuracy([bundles[k][n] for n in _FEDAVG_NETS], train[k], global_space) for k in sources}
    final = build_bundle(cfg.arch, global_space, global_space, model_seed(seed))
    _load_flat(final, global_state)
    nets = [final[n].eval() for n in _FEDAVG_NETS]
    cols = np.array(global_space)
    preds = cols[_predict(nets, target_ds.signals)]
    accesses["inference"] = target_ds.accesses
    tallies = [{int(p): 1} for p in preds]
    report = TaskReport(
        task=task_id, method="fedavg", seed=seed, source_clients=list(sources), target_client=target,
        disabled=[], per_phase_losses=log, per_client_train_acc=train_acc,
        target_acc=float((preds == target_ds.labels).mean()),
        vote_tallies=_vote_summary(preds, tallies, 1),
        bytes_per_phase=bus.bytes_per_phase(), target_accesses=accesses,
        wall_time_s=time.perf_counter() - t0,
    )
    return report, global_state, bundles


def run_method(method: str, task_id: int, cfg: FedConfig, seed: int) -> TaskReport:
    if method == "fedifl":
        return run_task(task_id, cfg, seed)
    if method == "fedavg":
        return run_fedavg_baseline(task_id, cfg, seed)
    raise ValueError(f"unknown method {method!r}; expected fedifl or fedavg")


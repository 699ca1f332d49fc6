"""Pipeline stages over a run directory ``<root>/<name>/{models,data,reports,fixtures}``.

Each stage records its outputs in ``manifest.json`` together with a stage
hash (the config sections it depends on, cumulatively), the source revision
and the seed.  Downstream stages check that chain before running.  Wall-clock
timings go to the ``run.log`` sidecar only, so every other file is a pure
function of config and seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import eval_report as er
from . import numkit as nk
from . import offline_data as od
from . import oracle as orc
from . import toylang as tl
from . import user_sim as us
from .config import ExperimentConfig
from .moe_model import ExpertTrainer, MoELM, ModelConfig, PrimitiveTrainer, mean_label
from .rl import ALGOS, DMPolicy, LatentNorm, RLConfig, Scorer, make_trainer

STAGES = ("gen-data", "train-primitive", "train-experts", "collect", "train-rl", "evaluate")
_STAGE_SECTIONS = {
    "gen-data": ["env", "corpus"],
    "train-primitive": ["model", "primitive"],
    "train-experts": ["experts"],
    "collect": ["collect"],
    "train-rl": ["rl"],
    "evaluate": ["user_model", "eval"],
}
_STAGE_IDS = {s: k for k, s in enumerate(STAGES)}


class MissingPrerequisite(RuntimeError):
    """An upstream artifact is absent; the message names the command that makes it."""


class StageMismatch(RuntimeError):
    """An upstream artifact was built from a different configuration."""


# ---------------------------------------------------------------------------
# bookkeeping


def source_revision() -> str:
    """Digest of the package sources and assets (stable across checkouts)."""
    h = hashlib.sha256()
    root = resources.files("moedm")
    paths = sorted(p for p in Path(str(root)).rglob("*") if p.suffix in (".py", ".json") and "__pycache__" not in p.parts)
    for p in paths:
        h.update(p.relative_to(Path(str(root))).as_posix().encode())
        h.update(p.read_bytes())
    return "src-" + h.hexdigest()[:12]


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    d = cfg.to_dict()
    secs = []
    for s in STAGES[: _STAGE_IDS[stage] + 1]:
        secs.extend(_STAGE_SECTIONS[s])
    doc = {"seed": cfg.run.seed, **{s: d[s] for s in secs}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def stage_rng(cfg: ExperimentConfig, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.run.seed, _STAGE_IDS[stage], *extra]))


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Paths, manifest and log of one run directory."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg, self.force = cfg, force
        self.root = cfg.run_dir()
        for sub in ("models", "data", "reports", "fixtures"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.revision = source_revision()

    def path(self, rel: str) -> Path:
        return self.root / rel

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def record(self, key: str, stage: str, outputs: list[str], extra: dict | None = None) -> None:
        man = self.manifest()
        man[key] = {"stage": stage, "stage_hash": stage_hash(self.cfg, stage), "config_hash": self.cfg.hash(),
                    "revision": self.revision, "seed": self.cfg.run.seed,
                    "outputs": {o: _sha(self.path(o)) for o in outputs}, **(extra or {})}
        self.manifest_path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")

    def log(self, msg: str) -> None:
        with open(self.root / "run.log", "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")

    def header(self, stage: str) -> dict:
        return {"stage": stage, "stage_hash": stage_hash(self.cfg, stage), "config_hash": self.cfg.hash(),
                "revision": self.revision, "seed": self.cfg.run.seed}

    def up_to_date(self, key: str, stage: str) -> bool:
        ent = self.manifest().get(key)
        if ent is None or ent["stage_hash"] != stage_hash(self.cfg, stage):
            return False
        return all(self.path(o).exists() and _sha(self.path(o)) == h for o, h in ent["outputs"].items())

    def require(self, key: str, stage: str, command: str) -> None:
        ent = self.manifest().get(key)
        if ent is None or not all(self.path(o).exists() for o in ent["outputs"]):
            raise MissingPrerequisite(f"{key} is missing in {self.root}; run `moedm {command}` first")
        if ent["stage_hash"] != stage_hash(self.cfg, stage) and not self.force:
            raise StageMismatch(f"{key} in {self.root} was built from a different configuration; "
                                f"rerun `moedm {command}` or pass --force")


def env_config(cfg: ExperimentConfig) -> us.EnvConfig:
    return us.load_env_config(cfg.env.table or None, noise_free=cfg.env.noise_free)


def rl_config(cfg: ExperimentConfig, seed: int | None = None) -> RLConfig:
    r = cfg.rl
    return RLConfig(gamma=r.gamma, tau=r.tau, alpha=r.alpha, beta=cfg.eval.beta, polyak=r.polyak, batch=r.batch,
                    lr=r.lr, steps=r.steps, dropout=r.dropout, n_masks=r.n_masks, teacher_forcing=r.teacher_forcing,
                    decode_temperature=cfg.eval.temperature, seed=cfg.run.seed if seed is None else seed)


def _write_rows(path, rows: list[dict], run: Run | None = None, stage: str | None = None) -> None:
    """CSV with fixed float formatting; with a run, every row also carries seed, config hash and revision."""
    if not rows:
        return
    stamp = {}
    if run is not None:
        h = run.header(stage)
        stamp = {"seed": h["seed"], "config_hash": h["config_hash"], "revision": h["revision"]}
    rows = [{**r, **stamp} for r in rows]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows({k: er.fmt_cell(v) for k, v in r.items()} for r in rows)
    Path(path).write_text(buf.getvalue())


def _skip(run: Run, key: str, stage: str) -> bool:
    if run.up_to_date(key, stage) and not run.force:
        run.log(f"{key}: up to date")
        return True
    return False


# ---------------------------------------------------------------------------
# phase one and two


def gen_data(run: Run) -> None:
    cfg = run.cfg
    if _skip(run, "corpus", "gen-data"):
        return
    env = env_config(cfg)
    t0 = time.perf_counter()
    corpus = od.generate_corpus(env, cfg.corpus.n_conversations, stage_rng(cfg, "gen-data", 0))
    held = od.generate_corpus(env, cfg.corpus.n_heldout, stage_rng(cfg, "gen-data", 1))
    tl.write_corpus(run.path("data/corpus.jsonl"), corpus, header=run.header("gen-data"))
    tl.write_corpus(run.path("data/heldout.jsonl"), held, header=run.header("gen-data"))
    run.record("corpus", "gen-data", ["data/corpus.jsonl", "data/heldout.jsonl"])
    run.log(f"gen-data: {len(corpus)} conversations in {time.perf_counter() - t0:.1f}s")


def _pairs(run: Run, name: str):
    return od.corpus_pairs(tl.read_corpus(run.path(f"data/{name}.jsonl")))


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(d=m.d, emb=m.emb, hidden=m.hidden, n_hidden=m.n_hidden, n_experts=m.m + 1,
                       horizon=env_config(cfg).horizon)


def train_primitive(run: Run) -> None:
    cfg = run.cfg
    run.require("corpus", "gen-data", "gen-data")
    if _skip(run, "primitive", "train-primitive"):
        return
    hs, ys = _pairs(run, "corpus")
    hh, hy = _pairs(run, "heldout")
    rng = stage_rng(cfg, "train-primitive")
    model = MoELM(model_config(cfg), seed=cfg.run.seed)
    tr = PrimitiveTrainer(model, kappa=cfg.primitive.kappa, lr=cfg.primitive.lr)
    t0, curve = time.perf_counter(), []
    for step in range(1, cfg.primitive.steps + 1):
        idx = rng.integers(len(hs), size=cfg.primitive.batch)
        nll, kl = tr.step([hs[i] for i in idx], [ys[i] for i in idx], rng)
        if step % 100 == 0 or step == 1:
            curve.append({"step": step, "nll": nll, "kl": kl})
    ppl = model.perplexity(hh, hy, rng=np.random.default_rng(cfg.run.seed))
    model.save(run.path("models/primitive.json"), {"header": run.header("train-primitive"), "heldout_ppl": ppl})
    _write_rows(run.path("models/primitive.curve.csv"), curve, run, "train-primitive")
    run.record("primitive", "train-primitive", ["models/primitive.json", "models/primitive.curve.csv"],
               {"heldout_perplexity": ppl})
    run.log(f"train-primitive: ppl {ppl:.3f} in {time.perf_counter() - t0:.1f}s")


def expert_gaps(model: MoELM, histories, seed: int, k: int = 4, temperature: float = 0.7) -> list[dict]:
    """Per intent: mean label of the trained expert versus the primitive on the same contexts."""
    rows = []
    for i in range(1, model.cfg.n_experts):
        e = mean_label(model, i, histories, np.random.default_rng([seed, i]), k=k, temperature=temperature)
        p = mean_label(model, i, histories, np.random.default_rng([seed, i]), expert=0, k=k, temperature=temperature)
        rows.append({"intent": tl.INTENTS[i], "expert_label": e, "primitive_label": p, "gap": e - p})
    return rows


def train_experts(run: Run) -> None:
    cfg = run.cfg
    run.require("primitive", "train-primitive", "train-primitive")
    if _skip(run, "experts", "train-experts"):
        return
    model = MoELM.load(run.path("models/primitive.json"))
    model.reset_experts_from_primitive()
    hs, _ = _pairs(run, "corpus")
    hh, _ = _pairs(run, "heldout")
    ctx = hs[: cfg.experts.n_contexts]
    z = model.encode(ctx)
    t0, curve = time.perf_counter(), []
    for i in range(1, model.cfg.n_experts):
        rng = stage_rng(cfg, "train-experts", i)
        tr = ExpertTrainer(model, i, lr=cfg.experts.lr, k=cfg.experts.k, temperature=cfg.experts.temperature)
        for step in range(1, cfg.experts.steps + 1):
            idx = rng.integers(len(ctx), size=cfg.experts.batch)
            lab = tr.step([ctx[j] for j in idx], rng, z=z[idx])
            if step % 100 == 0 or step == 1:
                curve.append({"expert": i, "step": step, "mean_label": lab})
    gaps = expert_gaps(model, hh, cfg.run.seed, k=cfg.experts.k, temperature=cfg.experts.temperature)
    model.save(run.path("models/experts.json"), {"header": run.header("train-experts")})
    _write_rows(run.path("models/experts.curve.csv"), curve, run, "train-experts")
    _write_rows(run.path("reports/experts.csv"), gaps, run, "train-experts")
    run.record("experts", "train-experts", ["models/experts.json", "models/experts.curve.csv", "reports/experts.csv"])
    run.log(f"train-experts: {time.perf_counter() - t0:.1f}s")


def load_experts(run: Run) -> MoELM:
    run.require("experts", "train-experts", "train-experts")
    return MoELM.load(run.path("models/experts.json"))


# ---------------------------------------------------------------------------
# phase three


def build_dataset(model: MoELM, env: us.EnvConfig, n_episodes: int, rng, temperature: float = 1.0,
                  candidate_temperature: float | None = 0.7) -> od.LatentDataset:
    eps = od.collect(model, n_episodes, env, rng, temperature=temperature)
    ds = od.encode_dataset(eps, model)
    od.attribute(ds, model)
    if candidate_temperature is not None:
        ds = od.augment(ds, model, rng, temperature=candidate_temperature)
    return ds


def collect(run: Run) -> None:
    cfg = run.cfg
    model = load_experts(run)
    if _skip(run, "dataset", "collect"):
        return
    t0 = time.perf_counter()
    ds = build_dataset(model, env_config(cfg), cfg.collect.n_episodes, stage_rng(cfg, "collect"),
                       cfg.collect.temperature, cfg.collect.candidate_temperature)
    od.save_dataset(ds, run.path("data/behavior.jsonl"),
                    {**run.header("collect"), "model_sha256": _sha(run.path("models/experts.json"))})
    run.record("dataset", "collect", ["data/behavior.jsonl"], {"transitions": len(ds)})
    run.log(f"collect: {len(ds)} transitions in {time.perf_counter() - t0:.1f}s")


def load_dataset(run: Run) -> od.LatentDataset:
    run.require("dataset", "collect", "collect")
    return od.load_dataset(run.path("data/behavior.jsonl"))


def train_rl(run: Run, algos=None) -> None:
    cfg = run.cfg
    algos = list(algos or cfg.rl.algos)
    model = load_experts(run)
    ds = None
    for algo in algos:
        if algo not in ALGOS:
            raise ValueError(f"unknown algorithm {algo!r}")
        key = f"rl_{algo}"
        if _skip(run, key, "train-rl"):
            continue
        ds = ds if ds is not None else load_dataset(run)
        t0 = time.perf_counter()
        tr = make_trainer(algo, rl_config(cfg), ds, model)
        tr.train()
        tr.save(run.path(f"models/{key}.json"), {"header": run.header("train-rl")})
        _write_rows(run.path(f"models/{key}.curve.csv"), tr.curve, run, "train-rl")
        run.record(key, "train-rl", [f"models/{key}.json", f"models/{key}.curve.csv"], {"gamma_used": tr.gamma})
        run.log(f"train-rl {algo}: {tr.step_count} steps in {time.perf_counter() - t0:.1f}s")


def user_model_for(run: Run, ds: od.LatentDataset | None = None) -> er.UserModel:
    """Train (or reload) the latent user model on critic-normalized latents."""
    cfg = run.cfg
    path = run.path("models/user_model.json")
    if run.up_to_date("user_model", "evaluate") and not run.force:
        return er.UserModel.load(path)
    ds = ds if ds is not None else load_dataset(run)
    norm = LatentNorm.fit(ds.z, ds.za)
    um = er.UserModel.create(ds.d, hidden=cfg.user_model.hidden, seed=cfg.run.seed)
    t0 = time.perf_counter()
    curve = er.train_user_model(um, norm(ds.za), ds.r, norm(ds.zn), steps=cfg.user_model.steps,
                                batch=cfg.user_model.batch, lr=cfg.user_model.lr, seed=cfg.run.seed)
    um.save(path, {"header": run.header("evaluate"), "norm": norm.to_dict()})
    rows = [{"step": s, "loss_r": a, "loss_z": b} for s, a, b in zip(curve["step"], curve["loss_r"], curve["loss_z"])]
    _write_rows(run.path("models/user_model.curve.csv"), rows, run, "evaluate")
    run.record("user_model", "evaluate", ["models/user_model.json", "models/user_model.curve.csv"])
    run.log(f"user model: {time.perf_counter() - t0:.1f}s")
    return um


def make_policy(cfg: ExperimentConfig, model: MoELM, scorer: Scorer, mode: str, um=None) -> DMPolicy:
    return DMPolicy(model, scorer, beta=cfg.eval.beta, mode=mode, user_model=um,
                    n_candidates=model.cfg.n_experts * cfg.eval.k, temperature=cfg.eval.temperature)


def workers(cfg: ExperimentConfig) -> int:
    return cfg.run.workers or (os.cpu_count() or 1)


def evaluate(run: Run, modes=None, algos=None) -> None:
    cfg = run.cfg
    modes = list(modes or cfg.eval.modes)
    algos = list(algos or cfg.rl.algos)
    model = load_experts(run)
    env = env_config(cfg)
    um = None
    for algo in algos:
        run.require(f"rl_{algo}", "train-rl", f"train-rl --algo {algo}")
    for mode in modes:
        if mode == "mb" and um is None:
            um = user_model_for(run)
        for algo in algos:
            key = f"eval_{algo}_{mode}"
            if _skip(run, key, "evaluate"):
                continue
            t0 = time.perf_counter()
            scorer = Scorer.load(run.path(f"models/rl_{algo}.json"))
            pol = make_policy(cfg, model, scorer, mode, um)
            res = er.evaluate(pol, env, n=cfg.eval.n, seed=int(stage_rng(cfg, "evaluate").integers(2**31)),
                              method=algo, mode=mode, n_experts=model.cfg.n_experts, workers=workers(cfg))
            div = diversity_of(model, res, cfg.eval.n_diversity, cfg.run.seed)
            doc = {"header": run.header("evaluate"), "method": algo, "mode": mode, "d": model.cfg.d,
                   "m": model.cfg.n_experts - 1, "returns": res.returns.tolist(), "counts": res.counts.tolist(),
                   "selections": res.selections, "diversity": div}
            run.path(f"reports/{key}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
            run.record(key, "evaluate", [f"reports/{key}.json"])
            run.log(f"evaluate {algo} {mode}: J={res.mean:.4f} +- {res.stderr:.4f} in {time.perf_counter() - t0:.1f}s")


def diversity_of(model: MoELM, res: er.EvalResult, n: int, seed: int) -> dict | None:
    pairs = res.samples[:n]
    if len(pairs) < 2:
        return None
    hs, ys = [h for h, _ in pairs], [y for _, y in pairs]
    ppl = model.perplexity(hs, ys, rng=np.random.default_rng(seed))
    return er.diversity_block(ys, er.utterance_embeddings(ys, model.cfg.vocab), ppl)


# ---------------------------------------------------------------------------
# report


def oracle_reference(env: us.EnvConfig) -> dict:
    mdp = orc.build_tabular(env)
    vi = orc.value_iteration(mdp)
    greedy = orc.simulate(mdp, orc.greedy_policy(mdp))
    return {"optimal_return": float(vi.V[mdp.s0]), "greedy_return": float(greedy),
            "greedy_gap": float(vi.V[mdp.s0] - greedy)}


def report(run: Run) -> tuple[list[dict], str]:
    """Aggregate every evaluation file into ``reports/results.{csv,json}`` and ``reports/table.csv``."""
    cfg = run.cfg
    docs = []
    man = run.manifest()
    for key in sorted(man):
        if key.startswith("eval_"):
            docs.append(json.loads(run.path(f"reports/{key}.json").read_text()))
    if not docs:
        raise MissingPrerequisite(f"no evaluations in {run.root}; run `moedm evaluate` first")
    shapes = {(d["d"], d["m"]) for d in docs}
    if len(shapes) > 1:
        raise StageMismatch(f"evaluations disagree on latent size or expert count: {sorted(shapes)}")
    order = {a: k for k, a in enumerate(ALGOS)}
    docs.sort(key=lambda d: (order.get(d["method"], 99), ("mf", "mb").index(d["mode"])))
    results, rows = [], []
    for d in docs:
        res = er.EvalResult(d["method"], d["mode"], np.asarray(d["returns"]), np.asarray(d["counts"]))
        results.append(res)
        rows.append(er.report_row(res, d["diversity"], d["header"]["seed"], d["header"]["config_hash"],
                                  d["header"]["revision"]))
    body = er.rows_to_csv(rows)
    run.path("reports/results.csv").write_text(body)
    header = {**run.header("evaluate"), "oracle": oracle_reference(env_config(cfg)),
              "user_model": "latent heads (reward, next latent); no utterance decoding"}
    run.path("reports/results.json").write_text(er.report_json(results, rows, header))
    run.path("reports/table.csv").write_text(er.table_csv(rows))
    return rows, body


# ---------------------------------------------------------------------------
# end-to-end checks used by verify and the acceptance suite


def planning_check(cfg: ExperimentConfig, model: MoELM, seeds=range(5), algos=("ftle", "moevrl", "bandit"),
                   n_episodes: int | None = None, n_eval: int | None = None, log=print) -> dict:
    """Train and roll out the planners on fresh behavior data per seed; mean returns per algorithm."""
    env = env_config(replace(cfg, env=replace(cfg.env, noise_free=True)))
    n_episodes = cfg.collect.n_episodes if n_episodes is None else n_episodes
    n_eval = cfg.eval.n if n_eval is None else n_eval
    out = {a: [] for a in algos}
    for seed in seeds:
        rng = np.random.default_rng([cfg.run.seed, 1000 + seed])
        ds = build_dataset(model, env, n_episodes, rng, cfg.collect.temperature, candidate_temperature=None)
        trained = {}
        for algo in algos:
            # MoE-VRL reuses the FtLE critic from the same seed when both are checked
            critic = trained["ftle"].mh if algo == "moevrl" and "ftle" in trained else None
            tr = make_trainer(algo, rl_config(cfg, seed=seed), ds, model, critic=critic)
            tr.train()
            trained[algo] = tr
            pol = make_policy(cfg, model, Scorer.from_trainer(tr), "mf")
            res = er.evaluate(pol, env, n=n_eval, seed=10_000 + seed, method=algo, n_experts=model.cfg.n_experts,
                              workers=workers(cfg))
            out[algo].append(res.mean)
            log(f"seed {seed} {algo}: J={res.mean:.4f} +- {res.stderr:.4f}")
    return {a: float(np.mean(v)) for a, v in out.items()} | {"per_seed": out}


def fixture_path(run: Run) -> Path:
    return run.path("fixtures/oracle.json")


def write_fixtures(run: Run) -> dict:
    doc = orc.dump_fixtures(env_config(replace(run.cfg, env=replace(run.cfg.env, noise_free=True))),
                            fixture_path(run))
    return doc

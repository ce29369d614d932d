"""The four-step loop: collect, analyse, train one adapter per capability, route.

Each stage writes its artifacts under the run directory and records a
fingerprint (configuration plus input file hashes) and the hashes of its
outputs in ``manifest.json``. A rerun skips stages whose fingerprint and
outputs are unchanged. No artifact depends on the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .adapters import (BuiltinRouter, GatewayRouter, LoraAdapter, RoutingCandidate, load_adapters,
                       render_exemplar, run_with_routing)
from .analysis import (AnalysisResult, CapabilityCard, LLMDiscoverer, LLMLabeler, RuleTableLabeler,
                       ScriptedDiscoverer, analyze, load_capabilities)
from .config import ConfigError, RunConfig
from .core import Trajectory, env_spec, read_trajectories, write_trajectories
from .gateway import HttpGateway, MockGateway
from .grpo import TrainResult, train_capability
from .kernels import content_hash, fnv1a64
from .metrics import EvalSummary, emit_report, summarize
from .policy import GatewayPolicy, OraclePolicy
from .presets import DEVICE_CAPABILITIES, DEVICE_RULES, builtin_policy
from .rollout import run_many

log = logging.getLogger(__name__)

STAGES = ("rollout", "analyze", "train", "eval", "report")
# keys that change how work is scheduled or where it lands, never what it computes
_NON_SEMANTIC = {("run", "workers"), ("run", "out_dir")}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def make_gateway(cfg: RunConfig) -> Any:
    gcfg = cfg.gateway_config()
    if cfg["gateway"]["mode"] == "http":
        return HttpGateway(gcfg)
    return MockGateway(seed=cfg.global_seed, scorer=BuiltinRouter().score_request,
                       max_in_flight=gcfg.max_in_flight, audit_path=gcfg.audit_path)


def make_policy(name: str, env_name: str, gateway: Any = None) -> Any:
    if name in ("device", "bandit"):
        return builtin_policy(name)
    if name == "oracle":
        return OraclePolicy()
    if name == "gateway":
        if gateway is None:
            raise ConfigError("policy 'gateway' needs a gateway")
        spec = env_spec(env_name)
        return GatewayPolicy(gateway, spec.system_prompt, spec.max_gen_tokens)
    raise ConfigError(f"unknown policy {name!r}")


def load_dictionary(cfg: RunConfig) -> list[CapabilityCard]:
    name = cfg["analysis"]["dictionary"]
    if name == "device":
        return [CapabilityCard.from_dict(c) for c in DEVICE_CAPABILITIES]
    data = json.loads(cfg.resolve(name).read_text(encoding="utf-8"))
    items = data["capabilities"] if isinstance(data, dict) else data
    return [CapabilityCard.from_dict({k: v for k, v in c.items()
                                      if k in CapabilityCard.__dataclass_fields__}) for c in items]


# config keys each stage reads: a whole section, or (section, key)
_STAGE_CONFIG: dict[str, tuple[Any, ...]] = {
    "rollout": ("gateway", "rollout", ("run", "global_seed"), ("paths", "dataset")),
    "analyze": ("gateway", "analysis", ("run", "global_seed"), ("paths", "capabilities")),
    "train": ("trainer", "rollout", ("routing", "exemplar_seeds"), ("run", "global_seed")),
    "eval": ("gateway", "routing", "rollout", ("run", "global_seed")),
    "report": (),
}


def semantic_config(cfg: RunConfig, stage: Optional[str] = None) -> dict[str, dict[str, Any]]:
    """Config values that can change artifacts, optionally only those ``stage`` reads."""
    out = {s: {k: v for k, v in keys.items() if (s, k) not in _NON_SEMANTIC}
           for s, keys in cfg.values.items()}
    if stage is None:
        return out
    picked: dict[str, dict[str, Any]] = {}
    for item in _STAGE_CONFIG[stage]:
        if isinstance(item, str):
            picked[item] = out[item]
        else:
            picked.setdefault(item[0], {})[item[1]] = out[item[0]][item[1]]
    return picked


def _external_files(cfg: RunConfig, stage: str) -> dict[str, str]:
    """Hashes of user files a stage reads outside the run directory."""
    paths = []
    if stage == "rollout" and cfg["paths"]["dataset"]:
        paths.append(cfg["paths"]["dataset"])
    if stage == "analyze":
        if cfg["paths"]["capabilities"]:
            paths.append(cfg["paths"]["capabilities"])
        if cfg["analysis"]["dictionary"] != "device":
            paths.append(cfg["analysis"]["dictionary"])
    return {p: file_hash(cfg.resolve(p)) for p in paths}


def file_hash(path: Path) -> str:
    return f"{fnv1a64(path.read_bytes()):016x}"


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _pmap(fn: Callable[[Any], Any], items: Sequence[Any], workers: int) -> list[Any]:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_history_csv(path: Path, result: TrainResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "rollouts", "mean_reward", "informative_groups", "loss", "updated"])
        for r in result.records:
            w.writerow([r.iteration, r.rollouts, f"{r.mean_reward:.6f}", r.informative_groups,
                        "" if r.loss is None else f"{r.loss:.9f}", int(r.updated)])


def find_exemplar(policy: Any, env_name: str, seeds: Sequence[int], global_seed: int,
                  max_steps: int) -> Optional[Trajectory]:
    """First successful greedy trajectory in seed order."""
    for s in seeds:
        traj = run_many(policy, env_name, [s], temperature=0.0, global_seed=global_seed,
                        max_steps=max_steps)[0]
        if traj.success:
            return traj
    return None


def annotate_adapter(result: TrainResult, base: Any, env: str, name: str, description: str,
                     exemplar_seeds: Sequence[int], global_seed: int, max_steps: int) -> LoraAdapter:
    """Attach routing metadata and training history to a trained adapter.

    The exemplar is the first successful greedy episode of the adapted policy;
    raises ValueError when none of ``exemplar_seeds`` succeeds.
    """
    adapter = result.adapter
    ex = find_exemplar(base.with_adapter(adapter), env, exemplar_seeds, global_seed, max_steps)
    if ex is None:
        raise ValueError(f"no successful exemplar on {env}")
    adapter.provenance.update({
        "env": env,
        "name": name,
        "description": description,
        "exemplar": render_exemplar(ex),
        "exemplar_seed": ex.episode_seed,
        "history": [r.to_dict() for r in result.records],
        "wasted_iterations": result.wasted_iterations,
    })
    adapter.provenance["trainer"].pop("workers", None)
    return adapter


@dataclass
class PipelineResult:
    out_dir: Path
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir: Optional[Path] = None,
                 echo: Callable[[str], None] = lambda s: log.info(s)):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir is not None else cfg.out_dir
        self.echo = echo
        self._gateway: Any = None
        if cfg["rollout"]["policy"] not in ("device", "bandit"):
            raise ConfigError("the pipeline trains adapters on the built-in policy; "
                              "[rollout] policy must be 'device' or 'bandit'")

    # -- paths
    def p(self, rel: str) -> Path:
        return self.out / rel

    @property
    def gateway(self) -> Any:
        if self._gateway is None:
            self._gateway = make_gateway(self.cfg)
        return self._gateway

    @property
    def env(self) -> str:
        return self.cfg["rollout"]["env"]

    @property
    def eval_env(self) -> str:
        return self.cfg["routing"]["eval_env"] or self.env

    def base_policy(self) -> Any:
        return builtin_policy(self.cfg["rollout"]["policy"])

    # -- manifest
    def _manifest(self) -> dict[str, Any]:
        path = self.p("manifest.json")
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        return {"stages": {}}

    def _fingerprint(self, stage: str, inputs: Sequence[str]) -> str:
        return content_hash({"stage": stage, "config": semantic_config(self.cfg, stage),
                             "external": _external_files(self.cfg, stage),
                             "inputs": {rel: file_hash(self.p(rel)) for rel in inputs}})

    def _fresh(self, manifest: dict[str, Any], stage: str, fp: str) -> bool:
        entry = manifest["stages"].get(stage)
        if entry is None or entry["fingerprint"] != fp:
            return False
        return all(self.p(rel).exists() and file_hash(self.p(rel)) == h
                   for rel, h in entry["outputs"].items())

    def _record(self, manifest: dict[str, Any], stage: str, fp: str, outputs: Sequence[str]) -> None:
        manifest["stages"][stage] = {"fingerprint": fp,
                                     "outputs": {rel: file_hash(self.p(rel)) for rel in sorted(outputs)}}
        _write_json(self.p("manifest.json"), manifest)

    # -- stages
    def stage_rollout(self) -> list[str]:
        dataset = self.cfg["paths"]["dataset"]
        if dataset is not None:
            trajs = read_trajectories(self.cfg.resolve(dataset))
        else:
            trajs = run_many(self.base_policy(), self.env, self.cfg.seeds("rollout", "seeds"),
                             self.cfg["rollout"]["temperature"], self.cfg.global_seed,
                             self.cfg["rollout"]["max_steps"], self.cfg.workers)
        n = write_trajectories(self.p("rollouts/base.jsonl"), trajs)
        self.echo(f"rollout: {n} trajectories, {sum(t.success for t in trajs)} successful")
        return ["rollouts/base.jsonl"]

    def stage_analyze(self) -> list[str]:
        caps = self.cfg["paths"]["capabilities"]
        if caps is not None:
            text = self.cfg.resolve(caps).read_text(encoding="utf-8")
            self.p("analysis").mkdir(parents=True, exist_ok=True)
            self.p("analysis/capabilities.json").write_text(text, encoding="utf-8")
            return ["analysis/capabilities.json"]
        D = read_trajectories(self.p("rollouts/base.jsonl"))
        a = self.cfg["analysis"]
        discoverer = (ScriptedDiscoverer(load_dictionary(self.cfg)) if a["discoverer"] == "scripted"
                      else LLMDiscoverer(self.gateway, seed=self.cfg.global_seed))
        labeler = (RuleTableLabeler(DEVICE_RULES) if a["labeler"] == "rules"
                   else LLMLabeler(self.gateway, seed=self.cfg.global_seed))
        res: AnalysisResult = analyze(D, discoverer, labeler, a["runs"], a["delta"], a["rho"],
                                      a["min_fraction"])
        res.write_json(self.p("analysis/capabilities.json"))
        res.write_csv(self.p("analysis/capabilities.csv"))
        self.echo(f"analyze: {len(res.cards)} candidates, retained {res.final or 'none'}")
        return ["analysis/capabilities.json", "analysis/capabilities.csv"]

    def stage_train(self) -> list[str]:
        cards, retained = load_capabilities(self.p("analysis/capabilities.json"))
        by_id = {c.id: c for c in cards}
        tcfg = self.cfg.trainer_config()
        seed = self.cfg["trainer"]["seed"]
        base = self.base_policy()
        outputs = []
        adapter_dir = self.p("adapters")
        adapter_dir.mkdir(parents=True, exist_ok=True)
        for stale in adapter_dir.glob("*.json"):
            stale.unlink()
        for cid in retained:
            card = by_id[cid]
            env = card.train_env or self.env
            result = train_capability(env, tcfg, seed, base, cid)
            if result.error is not None:
                raise StageError("train", f"{cid}: {result.error}")
            try:
                adapter = annotate_adapter(result, base, env, card.name, card.description,
                                           self.cfg.seeds("routing", "exemplar_seeds"),
                                           self.cfg.global_seed, tcfg.max_steps)
            except ValueError as exc:
                raise StageError("train", f"{cid}: {exc}") from exc
            adapter.save(adapter_dir / f"{cid}.json")
            write_history_csv(self.p(f"train/{cid}.csv"), result)
            outputs += [f"adapters/{cid}.json", f"train/{cid}.csv"]
            self.echo(f"train: {cid} on {env}: reward {result.history[0]:.3f} -> "
                      f"{result.history[-1]:.3f} over {len(result.history)} iterations")
        return outputs

    def candidates(self, adapters: dict[str, LoraAdapter]) -> list[RoutingCandidate]:
        return [RoutingCandidate(cid, a.provenance.get("name", cid), a.provenance.get("description", ""),
                                 a.provenance.get("exemplar", "")) for cid, a in sorted(adapters.items())]

    def stage_eval(self) -> list[str]:
        adapters = load_adapters(self.p("adapters")) if self.p("adapters").exists() else {}
        seeds = self.cfg.seeds("routing", "eval_seeds")
        temp = self.cfg["routing"]["eval_temperature"]
        max_steps = self.cfg["rollout"]["max_steps"]
        base = self.base_policy()
        base_trajs = run_many(base, self.eval_env, seeds, temp, self.cfg.global_seed, max_steps,
                              self.cfg.workers)
        router = GatewayRouter(self.gateway) if self.cfg["routing"]["router"] == "gateway" else BuiltinRouter()
        cands = self.candidates(adapters)

        def one(seed: int) -> Any:
            return run_with_routing(self.eval_env, seed, router, base, adapters, cands,
                                    temperature=temp, global_seed=self.cfg.global_seed,
                                    max_steps=max_steps)

        routed = _pmap(one, seeds, self.cfg.workers)
        routed_trajs = [t for t, _ in routed]
        write_trajectories(self.p("eval/base.jsonl"), base_trajs)
        write_trajectories(self.p("eval/routed.jsonl"), routed_trajs)
        with self.p("eval/routing.jsonl").open("w", encoding="utf-8") as f:
            for seed, (_, d) in zip(seeds, routed):
                f.write(json.dumps({"seed": seed, **d.to_dict()}, sort_keys=True) + "\n")
        train_rollouts = sum(sum(r["rollouts"] for r in a.provenance.get("history", []))
                             for a in adapters.values())
        s_base = summarize(base_trajs, 0, 0)
        s_routed = summarize(routed_trajs, train_rollouts, len(adapters))
        counts: dict[str, int] = {}
        for _, d in routed:
            counts[d.chosen] = counts.get(d.chosen, 0) + 1
        _write_json(self.p("eval/summary.json"), {
            "env": self.eval_env,
            "tasks": len(seeds),
            "base": s_base.to_dict(),
            "routed": s_routed.to_dict(),
            "improvement": s_routed.pass_rate - s_base.pass_rate,
            "routing_counts": dict(sorted(counts.items())),
        })
        self.echo(f"eval: base pass rate {s_base.pass_rate:.3f}, routed {s_routed.pass_rate:.3f} "
                  f"on {len(seeds)} tasks")
        return ["eval/base.jsonl", "eval/routed.jsonl", "eval/routing.jsonl", "eval/summary.json"]

    def stage_report(self) -> list[str]:
        paths = report_from_run(self.out, self.p("report"))
        return [str(p.relative_to(self.out)) for p in paths.values()]

    # -- driver
    _INPUTS = {
        "rollout": [],
        "analyze": ["rollouts/base.jsonl"],
        "train": ["analysis/capabilities.json"],
        "eval": [],  # adapters are listed dynamically
        "report": ["eval/summary.json"],
    }

    def _inputs(self, stage: str, manifest: dict[str, Any]) -> list[str]:
        if stage in ("eval", "report"):
            train = manifest["stages"].get("train", {}).get("outputs", {})
            return sorted(train) + self._INPUTS[stage]
        return self._INPUTS[stage]

    def run(self, resume: bool = True, stages: Sequence[str] = STAGES) -> PipelineResult:
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = self._manifest() if resume else {"stages": {}}
        result = PipelineResult(self.out)
        for stage in STAGES:
            if stage not in stages:
                continue
            try:
                fp = self._fingerprint(stage, self._inputs(stage, manifest))
            except FileNotFoundError as exc:
                raise StageError(stage, f"missing input {exc.filename}") from exc
            if resume and self._fresh(manifest, stage, fp):
                result.skipped.append(stage)
                self.echo(f"{stage}: up to date")
                continue
            try:
                outputs = getattr(self, f"stage_{stage}")()
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, exc) from exc
            self._record(manifest, stage, fp, outputs)
            result.ran.append(stage)
        if self.p("eval/summary.json").exists():
            result.summary = json.loads(self.p("eval/summary.json").read_text(encoding="utf-8"))
        return result


def report_from_run(run_dir: Path | str, out_dir: Path | str) -> dict[str, Path]:
    """Scaling CSVs from a run directory's adapters and evaluation summary."""
    run_dir = Path(run_dir)
    histories = []
    adapters_dir = run_dir / "adapters"
    if adapters_dir.exists():
        for cid, a in sorted(load_adapters(adapters_dir).items()):
            histories.append((cid, [(r["rollouts"], r["mean_reward"]) for r in a.provenance.get("history", [])]))
    summaries = []
    summary_path = run_dir / "eval" / "summary.json"
    if summary_path.exists():
        data = json.loads(summary_path.read_text(encoding="utf-8"))
        summaries = [("base", EvalSummary.from_dict(data["base"])),
                     ("routed", EvalSummary.from_dict(data["routed"]))]
    return emit_report(histories, summaries, out_dir)


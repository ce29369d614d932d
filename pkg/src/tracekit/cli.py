"""Command-line entry point.

Exit codes: 0 success, 1 stage or runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import click

from .config import ConfigError, defaults, load_config, parse_seed_range

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

POLICIES = ("device", "bandit", "oracle", "gateway")


def _guard(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Map domain errors onto exit codes."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        from .pipeline import StageError

        try:
            return fn(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_CONFIG)
        except StageError as exc:
            click.echo(f"error: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_FAILURE)
        except Exception as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            raise click.exceptions.Exit(EXIT_FAILURE)

    return wrapper


def _seeds(ctx: click.Context, param: click.Parameter, value: str) -> list[int]:
    try:
        return parse_seed_range(value)
    except ConfigError as exc:
        raise click.BadParameter(str(exc)) from exc


def _gateway(mode: str) -> Any:
    from .adapters import BuiltinRouter
    from .gateway import GatewayConfig, HttpGateway, MockGateway

    gcfg = GatewayConfig.from_env()
    if mode == "http":
        return HttpGateway(gcfg)
    return MockGateway(seed=0, scorer=BuiltinRouter().score_request, max_in_flight=gcfg.max_in_flight,
                       audit_path=gcfg.audit_path)


def _check_env(name: str) -> None:
    from .core import env_names

    if name not in env_names():
        raise ConfigError(f"unknown environment {name!r}; known: {', '.join(env_names())}")


gateway_option = click.option("--gateway", "gateway_mode", type=click.Choice(["mock", "http"]),
                              default="mock", show_default=True,
                              help="Transport for model calls; http reads TRACEKIT_* variables.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def cli(verbose: int) -> None:
    """Capability-targeted agent improvement: collect, analyse, train adapters, route."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@click.option("--env", "env_name", required=True, help="Registered environment name.")
@click.option("--seeds", default="0..99", show_default=True, callback=_seeds,
              help="Seed range A..B (inclusive) or comma list.")
@click.option("--k", "K", default=1, show_default=True, type=click.IntRange(min=1),
              help="Rollouts per seed; K >= 2 collects same-seed groups.")
@click.option("--temp", "temperature", default=1.0, show_default=True, help="Sampling temperature.")
@click.option("--policy", type=click.Choice(POLICIES), default="device", show_default=True)
@click.option("--max-steps", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--global-seed", default=0, show_default=True)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@gateway_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Output JSONL file.")
@_guard
def rollout(env_name: str, seeds: list[int], K: int, temperature: float, policy: str, max_steps: int,
            global_seed: int, workers: int, gateway_mode: str, out: Path) -> None:
    """Run episodes and write trajectories as JSONL."""
    from .core import write_trajectories
    from .pipeline import make_policy
    from .rollout import collect_groups, run_many

    _check_env(env_name)
    pol = make_policy(policy, env_name, _gateway(gateway_mode) if policy == "gateway" else None)
    if K == 1:
        trajs = run_many(pol, env_name, seeds, temperature, global_seed, max_steps, workers)
    else:
        groups = collect_groups(pol, env_name, seeds, K, temperature, global_seed, max_steps, workers)
        trajs = [t for g in groups for t in g.trajectories]
    n = write_trajectories(out, trajs)
    ok = sum(t.success for t in trajs)
    click.echo(f"wrote {n} trajectories to {out} ({ok} successful)")


@cli.command("verify-env")
@click.option("--env", "env_name", required=True)
@click.option("--policy", type=click.Choice(POLICIES), default="device", show_default=True)
@click.option("--n-rollouts", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--n-groups", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--k", "K", default=8, show_default=True, type=click.IntRange(min=2))
@click.option("--temp", "temperature", default=1.0, show_default=True)
@click.option("--max-steps", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--global-seed", default=0, show_default=True)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@gateway_option
@click.option("--json", "json_out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Also write the report JSON to this file.")
@_guard
def verify_env(env_name: str, policy: str, n_rollouts: int, n_groups: int, K: int, temperature: float,
               max_steps: int, global_seed: int, workers: int, gateway_mode: str,
               json_out: Optional[Path]) -> None:
    """Reward distribution and group-variance check for an environment."""
    from .pipeline import make_policy
    from .rollout import verify_environment

    _check_env(env_name)
    pol = make_policy(policy, env_name, _gateway(gateway_mode) if policy == "gateway" else None)
    rep = verify_environment(pol, env_name, n_rollouts, n_groups, K, temperature, global_seed,
                             max_steps, workers)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    click.echo(rep.to_text())
    click.echo(text)
    if json_out is not None:
        json_out.parent.mkdir(parents=True, exist_ok=True)
        json_out.write_text(text + "\n", encoding="utf-8")


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="Trajectory JSONL.")
@click.option("--runs", default=10, show_default=True, type=click.IntRange(min=1),
              help="Labeling runs for the consistency filter.")
@click.option("--delta", default=0.2, show_default=True, help="Minimum contrastive gap.")
@click.option("--rho", default=0.1, show_default=True, help="Minimum failure coverage.")
@click.option("--min-fraction", default=0.8, show_default=True, help="Share of runs that must retain.")
@click.option("--dictionary", default="device", show_default=True,
              help="'device' or a JSON file of capability cards.")
@click.option("--labeler", type=click.Choice(["rules", "planted", "llm"]), default="rules",
              show_default=True)
@gateway_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Output capabilities JSON.")
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Per-run statistics CSV (default: next to --out).")
@_guard
def analyze(in_path: Path, runs: int, delta: float, rho: float, min_fraction: float, dictionary: str,
            labeler: str, gateway_mode: str, out: Path, csv_out: Optional[Path]) -> None:
    """Identify lacking capabilities by contrasting failed and successful trajectories."""
    from . import analysis as an
    from .core import read_trajectories
    from .pipeline import load_dictionary
    from .presets import DEVICE_RULES

    cfg = defaults()
    cfg.set("analysis", "dictionary", dictionary)
    if dictionary != "device" and not Path(dictionary).exists():
        raise ConfigError(f"dictionary {dictionary} does not exist")
    cards = load_dictionary(cfg)
    D = read_trajectories(in_path)
    lab: Any
    if labeler == "rules":
        lab = an.RuleTableLabeler(DEVICE_RULES)
    elif labeler == "planted":
        lab = an.PlantedLabeler()
    else:
        lab = an.LLMLabeler(_gateway(gateway_mode))
    res = an.analyze(D, an.ScriptedDiscoverer(cards), lab, runs, delta, rho, min_fraction)
    res.write_json(out)
    res.write_csv(csv_out or out.with_suffix(".csv"))
    counts = res.selection_counts()
    for c in res.cards:
        s = res.run_stats[0][c.id]
        mark = "retained" if c.id in res.final else "rejected"
        click.echo(f"{c.id:32s} gap={s.gap:+.3f} cov={s.coverage:.3f} runs={counts[c.id]}/{runs} {mark}")


@cli.command()
@click.option("--env", "env_name", required=True, help="Training environment.")
@click.option("--capability", "capability_id", required=True, help="Capability id for the adapter.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Run config; its [trainer] section sets the hyperparameters.")
@click.option("--policy", type=click.Choice(["device", "bandit"]), default="device", show_default=True)
@click.option("--seed", default=None, type=int, help="Training seed (default: [trainer] seed, 0).")
@click.option("--learning-rate", default=None, type=float,
              help="Override; default 1.0 for sgd, 1e-5 for adamw.")
@click.option("--max-iterations", default=None, type=int, help="Override; default 40.")
@click.option("--workers", default=None, type=click.IntRange(min=1), help="Override; default 1.")
@click.option("--caps", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Capabilities JSON supplying the routing name and description.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Adapter JSON file.")
@_guard
def train(env_name: str, capability_id: str, config_path: Optional[Path], policy: str, seed: Optional[int],
          learning_rate: Optional[float], max_iterations: Optional[int], workers: Optional[int],
          caps: Optional[Path], out: Path) -> None:
    """Train one low-rank adapter with group-relative policy optimisation."""
    from .analysis import load_capabilities
    from .grpo import train_capability
    from .pipeline import annotate_adapter, write_history_csv
    from .presets import DEVICE_CAPABILITIES, builtin_policy

    _check_env(env_name)
    cfg = load_config(config_path) if config_path is not None else defaults()
    if learning_rate is not None:
        cfg.set("trainer", "learning_rate", learning_rate)
    if max_iterations is not None:
        cfg.set("trainer", "max_iterations", max_iterations)
    if workers is not None:
        cfg.set("run", "workers", workers)
    try:
        tcfg = cfg.trainer_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seed = cfg["trainer"]["seed"] if seed is None else seed
    base = builtin_policy(policy)
    card = next((c for c in DEVICE_CAPABILITIES if c["id"] == capability_id), {})
    name, description = card.get("name", capability_id), card.get("description", "")
    if caps is not None:
        cards, _ = load_capabilities(caps)
        match = [c for c in cards if c.id == capability_id]
        if not match:
            raise ConfigError(f"capability {capability_id!r} not in {caps}")
        name, description = match[0].name, match[0].description
    result = train_capability(env_name, tcfg, seed, base, capability_id)
    for r in result.records:
        click.echo(f"iter {r.iteration:3d}  mean reward {r.mean_reward:.3f}  "
                   f"informative {r.informative_groups}")
    write_history_csv(out.with_suffix(".history.csv"), result)
    if result.error is not None:
        result.adapter.save(out)
        click.echo(f"error: training aborted ({result.error}); saved last good adapter", err=True)
        raise click.exceptions.Exit(EXIT_FAILURE)
    try:
        annotate_adapter(result, base, env_name, name, description, cfg.seeds("routing", "exemplar_seeds"),
                         cfg.global_seed, tcfg.max_steps)
    finally:
        result.adapter.save(out)


def _routing_setup(caps: Path, adapters_dir: Path) -> tuple[dict[str, Any], list[Any]]:
    from .adapters import RoutingCandidate, load_adapters
    from .analysis import load_capabilities

    cards, retained = load_capabilities(caps)
    adapters = load_adapters(adapters_dir)
    keep = [c for c in cards if c.id in retained and c.id in adapters]
    cands = []
    for c in sorted(keep, key=lambda c: c.id):
        prov = adapters[c.id].provenance
        cands.append(RoutingCandidate(c.id, prov.get("name", c.name), prov.get("description", c.description),
                                      prov.get("exemplar", "")))
    return {c.id: adapters[c.id] for c in keep}, cands


def _router(kind: str, gateway_mode: str) -> Any:
    from .adapters import BuiltinRouter, GatewayRouter

    return BuiltinRouter() if kind == "builtin" else GatewayRouter(_gateway(gateway_mode))


@cli.command()
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="File holding the task's first observation.")
@click.option("--caps", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="Capabilities JSON from analyze.")
@click.option("--adapters", "adapters_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True)
@click.option("--router", type=click.Choice(["gateway", "builtin"]), default="gateway", show_default=True)
@gateway_option
@_guard
def route(task_path: Path, caps: Path, adapters_dir: Path, router: str, gateway_mode: str) -> None:
    """Print the routing decision and label logits for one task."""
    from .adapters import assemble_routing_prompt
    from .adapters import route as do_route

    _, cands = _routing_setup(caps, adapters_dir)
    prompt = assemble_routing_prompt(task_path.read_text(encoding="utf-8").strip(), cands)
    decision = do_route(_router(router, gateway_mode), prompt)
    click.echo(json.dumps({**decision.to_dict(), "labels": prompt.label_map}, indent=2, sort_keys=True))


@cli.command("eval")
@click.option("--env", "env_name", required=True)
@click.option("--seeds", default="100000..100099", show_default=True, callback=_seeds)
@click.option("--policy", type=click.Choice(POLICIES), default="device", show_default=True)
@click.option("--temp", "temperature", default=0.0, show_default=True, help="0 decodes greedily.")
@click.option("--route/--no-route", "routed", default=False, show_default=True,
              help="Route each task to at most one adapter.")
@click.option("--caps", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--adapters", "adapters_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              default=None)
@click.option("--router", type=click.Choice(["gateway", "builtin"]), default="gateway", show_default=True)
@click.option("--max-steps", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--global-seed", default=0, show_default=True)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@gateway_option
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Output directory for trajectories and summary.json.")
@_guard
def eval_cmd(env_name: str, seeds: list[int], policy: str, temperature: float, routed: bool,
             caps: Optional[Path], adapters_dir: Optional[Path], router: str, max_steps: int,
             global_seed: int, workers: int, gateway_mode: str, out: Path) -> None:
    """Evaluate a policy, optionally with adapter routing, and write a summary."""
    from .adapters import BuiltinRouter, GatewayRouter, run_with_routing
    from .core import write_trajectories
    from .metrics import summarize
    from .pipeline import _pmap, make_policy
    from .rollout import run_many

    _check_env(env_name)
    gw = _gateway(gateway_mode) if (policy == "gateway" or (routed and router == "gateway")) else None
    pol = make_policy(policy, env_name, gw)
    out.mkdir(parents=True, exist_ok=True)
    if routed:
        if caps is None or adapters_dir is None:
            raise ConfigError("--route needs --caps and --adapters")
        if not hasattr(pol, "with_adapter"):
            raise ConfigError("routing merges adapters into the built-in policy; use --policy device or bandit")
        adapters, cands = _routing_setup(caps, adapters_dir)
        rtr = BuiltinRouter() if router == "builtin" else GatewayRouter(gw)
        res = _pmap(lambda s: run_with_routing(env_name, s, rtr, pol, adapters, cands,
                                               temperature=temperature, global_seed=global_seed,
                                               max_steps=max_steps), seeds, workers)
        trajs = [t for t, _ in res]
        with (out / "routing.jsonl").open("w", encoding="utf-8") as f:
            for s, (_, d) in zip(seeds, res):
                f.write(json.dumps({"seed": s, **d.to_dict()}, sort_keys=True) + "\n")
    else:
        trajs = run_many(pol, env_name, seeds, temperature, global_seed, max_steps, workers)
    write_trajectories(out / "trajectories.jsonl", trajs)
    summary = summarize(trajs)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    click.echo(f"pass rate {summary.pass_rate:.3f} ({sum(summary.solved.values())}/"
               f"{sum(summary.total.values())}), mean reward {summary.mean_similarity:.3f}")


@cli.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True, help="Pipeline run directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@_guard
def report(in_dir: Path, out_dir: Path) -> None:
    """Emit rollouts-vs-score and capabilities-vs-score CSVs from a run directory."""
    from .pipeline import report_from_run

    for name, path in report_from_run(in_dir, out_dir).items():
        click.echo(f"{name}: {path}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Run directory (default: [run] out_dir).")
@click.option("--workers", default=None, type=click.IntRange(min=1),
              help="Override [run] workers (default 1); artifacts do not depend on it.")
@click.option("--resume/--no-resume", default=True, show_default=True,
              help="Skip stages whose inputs and outputs are unchanged.")
@_guard
def pipeline(config_path: Path, out_dir: Optional[Path], workers: Optional[int], resume: bool) -> None:
    """Run collect, analyze, train, eval and report end to end."""
    from .pipeline import Pipeline

    cfg = load_config(config_path)
    if workers is not None:
        cfg.set("run", "workers", workers)
    result = Pipeline(cfg, out_dir, echo=click.echo).run(resume=resume)
    s = result.summary
    if s:
        click.echo(f"base pass rate {s['base']['pass_rate']:.3f}, routed {s['routed']['pass_rate']:.3f}, "
                   f"improvement {100 * s['improvement']:+.1f} points")


@cli.command("gen-env-prompt")
@click.option("--caps", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="Capabilities JSON (analyze output) or a JSON list of cards.")
@click.option("--capability", "capability_id", required=True)
@click.option("--examples", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Trajectory JSONL; failing episodes are quoted.")
@click.option("--examples-ref", default=None, help="Reference (path or URL) used instead of quoting.")
@click.option("--max-examples", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--game-name", default=None, help="Environment name (default: <capability>_game).")
@click.option("--server-url", default="http://localhost:8000/v1", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write here instead of stdout.")
@_guard
def gen_env_prompt(caps: Path, capability_id: str, examples: Optional[Path], examples_ref: Optional[str],
                   max_examples: int, game_name: Optional[str], server_url: str, out: Optional[Path]) -> None:
    """Render the environment-design prompt for one capability."""
    from .analysis import render_trajectory
    from .core import read_trajectories
    from .prompts import PromptError, card_prompt_values, render_env_prompt

    data = json.loads(caps.read_text(encoding="utf-8"))
    items = data["capabilities"] if isinstance(data, dict) else data
    card = next((c for c in items if c.get("id") == capability_id), None)
    if card is None:
        raise ConfigError(f"capability {capability_id!r} not in {caps}")
    if examples is not None:
        fails = [t for t in read_trajectories(examples) if not t.success][:max_examples]
        traj_text = "\n\n".join(render_trajectory(t) for t in fails)
    else:
        traj_text = examples_ref or ""
    values = card_prompt_values(card, traj_text, game_name or f"{capability_id}_game", server_url)
    try:
        text = render_env_prompt(values)
    except PromptError as exc:
        raise ConfigError(str(exc)) from exc
    if out is None:
        click.echo(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        click.echo(f"wrote {out}")


def main(argv: Optional[list[str]] = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="tracekit", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG if isinstance(exc, click.UsageError) else exc.exit_code
    except click.exceptions.Abort:
        return EXIT_FAILURE
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

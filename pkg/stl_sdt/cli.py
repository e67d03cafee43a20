"""Command-line interface for STL-SDT."""

import contextlib
import functools
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import click
from loguru import logger
from termcolor import colored
from yaspin import yaspin

from stl_sdt.config import load_json
from stl_sdt.data import (
    RELABEL_RULES,
    OfflineDataset,
    annotate_dataset,
    compute_stats,
    load_dataset,
    relabel_costs,
    save_dataset,
    summarize_dataset,
    trajectory_from_record,
)
from stl_sdt.envs import ENV_KINDS, SCHEMA, BehaviorMix, EnvConfig, default_env_config, generate_dataset
from stl_sdt.errors import DataError, DatasetSchemaError, StlSdtError, UsageError
from stl_sdt.evaluation import (
    ACTION_MODES,
    EvalConfig,
    alignment_sweep,
    load_policy,
    parse_grid,
    rollout,
    suffix_alignment,
    write_sweep_csv,
)
from stl_sdt.policy import ablation_tokens
from stl_sdt.stl.formula import Formula, format_formula, validate_formula
from stl_sdt.stl.parser import parse_formula
from stl_sdt.stl.robustness import Signal, prefix_trace, robustness, robustness_at_all, suffix_trace
from stl_sdt.stl.specs import builtin_spec_text, scale_predicate
from stl_sdt.training import TrainConfig, train

RULE_HELP = (
    "monitor: costs sum to zero exactly when the built-in formula holds. "
    "window: step t is flagged when the five preceding costs are all 1, even if the violation later clears."
)
ABLATION_MODES = ("full", "no-prefix", "no-suffix", "reward-prefix", "bc")
AUDIT_MARGIN = 1e-6


def _status(text: str, color: str = "cyan") -> None:
    click.echo(colored(text, color), err=True)


def _print_config(config: Dict[str, Any]) -> None:
    """Print the effective configuration line every command starts with."""
    _status("# config " + json.dumps(config, sort_keys=True))


def _configure_logging(verbose: int) -> None:
    level = {0: "WARNING", 1: "INFO"}.get(verbose, "DEBUG")
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <7} | {message}")
    logger.enable("stl_sdt")


@contextlib.contextmanager
def _progress(text: str) -> Iterator[Callable[[str], None]]:
    """Yield a progress callback; shows a spinner only on an interactive terminal."""
    if not sys.stdout.isatty():
        yield lambda message: logger.info(message)
        return
    with yaspin(text=text) as spinner:

        def update(message: str) -> None:
            spinner.text = f"{text} {message}"

        yield update
        spinner.ok("✔")


def handle_errors(func: Callable[..., None]) -> Callable[..., None]:
    """Turn library errors into one JSON error line and the matching exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            func(*args, **kwargs)
        except StlSdtError as e:
            click.echo(json.dumps(e.to_dict()), err=True)
            sys.exit(e.exit_code)
        except KeyboardInterrupt:
            _status("Interrupted.", "yellow")
            sys.exit(130)

    return wrapper


def _read_spec(source: str) -> Tuple[str, Formula]:
    """Formula text from a file path or inline, plus the parsed formula."""
    path = Path(source)
    text = source
    try:
        if path.is_file():
            text = path.read_text(encoding="utf-8").strip()
    except OSError as e:
        raise UsageError(f"cannot read specification {source}: {e}") from e
    return text, parse_formula(text)


def _dataset_formula(dataset: OfflineDataset, spec: Optional[str], env_kind: Optional[str] = None) -> Formula:
    if spec is not None:
        return _read_spec(spec)[1]
    if dataset.spec is not None:
        return dataset.formula()
    kind = env_kind or dataset.env
    if kind in ENV_KINDS:
        config = EnvConfig.from_dict(dataset.config) if dataset.config else None
        return parse_formula(builtin_spec_text(kind, config))
    raise UsageError("no specification: pass --spec or use a dataset with a header")


def _signals(path: str) -> Iterator[Signal]:
    """Signals from a JSONL file of channel-column objects or trajectory records."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read signals {path}: {e}") from e
    index = 0
    for row, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"row {row}: invalid JSON: {e.msg}") from e
        if not isinstance(record, dict):
            raise DataError(f"row {row}: expected a JSON object")
        if "actions" in record:
            yield trajectory_from_record(record, row, index).signal()
            index += 1
        elif "states" in record:
            try:
                yield Signal(tuple(record.get("schema", SCHEMA)), record["states"])
            except (TypeError, ValueError) as e:
                raise DatasetSchemaError("expected rows of numbers", row, "states", index) from e
            index += 1
        elif set(record) <= {"env", "spec", "config"}:
            continue
        else:
            try:
                yield Signal.from_columns(record)
            except (TypeError, ValueError) as e:
                raise DataError(f"row {row}: channels must be lists of numbers") from e


def _parse_seeds(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds must be comma-separated integers, got '{text}'") from e


@click.group()
@click.version_option(package_name="stl-sdt")
@click.option("-v", "--verbose", count=True, help="Increase log detail (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Monitor STL specifications and train specification-conditioned policies."""
    _configure_logging(verbose)


@main.command()
@click.option("--spec", required=True, help="Formula text, or a file holding it.")
@click.option("--signals", "signals_path", required=True, type=click.Path(), help="JSONL signals.")
@click.option("--at", "at", type=int, default=1, show_default=True, help="1-indexed step to evaluate.")
@click.option("--prefix", "mode", flag_value="prefix", help="Print the prefix robustness trace.")
@click.option("--suffix", "mode", flag_value="suffix", help="Print the suffix robustness trace.")
@click.option("--trace", "mode", flag_value="trace", help="Print robustness at every step.")
@handle_errors
def monitor(spec: str, signals_path: str, at: int, mode: Optional[str]) -> None:
    """Print robustness values of SPEC over every signal as JSON lines."""
    _, phi = _read_spec(spec)
    mode = mode or "at"
    _print_config({"command": "monitor", "spec": format_formula(phi), "signals": signals_path, "at": at, "mode": mode})
    for i, signal in enumerate(_signals(signals_path)):
        validate_formula(phi, signal.schema)
        out: Dict[str, Any] = {"signal": i}
        if mode == "trace":
            out["trace"] = robustness_at_all(signal, phi).tolist()
        elif mode == "prefix":
            out["prefix"] = prefix_trace(signal, phi).tolist()
        elif mode == "suffix":
            out["suffix"] = suffix_trace(signal, phi).tolist()
        else:
            rho = robustness(signal, at, phi)
            out.update({"t": at, "robustness": rho, "satisfied": rho > 0.0})
        click.echo(json.dumps(out))


@main.command("gen-data")
@click.option("--env", "env_kind", type=click.Choice(ENV_KINDS), default="run", show_default=True)
@click.option("--n", "n_trajectories", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_source", default=None, help="EnvConfig overrides as JSON (file or inline).")
@click.option("--mix", "mix_source", default=None, help="Behavior mix as JSON [[fraction, margin, noise], ...].")
@click.option("--out", required=True, type=click.Path(), help="Dataset JSONL to write.")
@handle_errors
def gen_data(
    env_kind: str, n_trajectories: int, seed: int, config_source: Optional[str], mix_source: Optional[str], out: str
) -> None:
    """Generate an offline dataset of scripted behavior."""
    overrides = load_json(config_source) if config_source else {}
    if not isinstance(overrides, dict):
        raise UsageError("--config must be a JSON object")
    config = EnvConfig.from_dict({**overrides, "kind": env_kind, "seed": seed})
    mix = [BehaviorMix.from_list(entry) for entry in load_json(mix_source)] if mix_source else None
    _print_config(
        {
            "command": "gen-data",
            "env": config.to_dict(),
            "n": n_trajectories,
            "mix": [[m.fraction, m.margin, m.noise] for m in mix] if mix else None,
            "out": out,
        }
    )
    with _progress("generating") as progress:
        dataset = generate_dataset(config, n_trajectories, mix, seed, log_callback=progress)
    save_dataset(dataset, out)
    stats = dataset.stats
    _status(f"wrote {len(dataset)} trajectories to {out}; satisfaction {stats.satisfaction if stats else 0:.3f}", "green")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(), help="Dataset JSONL to read.")
@click.option("--env-kind", type=click.Choice(ENV_KINDS), default=None, help="Defaults to the dataset header.")
@click.option("--rule", type=click.Choice(RELABEL_RULES), default="monitor", show_default=True, help=RULE_HELP)
@click.option("--spec", default=None, help="Formula used by the audit; defaults to the dataset header.")
@click.option("--out", required=True, type=click.Path(), help="Dataset JSONL to write.")
@handle_errors
def relabel(in_path: str, env_kind: Optional[str], rule: str, spec: Optional[str], out: str) -> None:
    """Add relabeled costs and audit them against robustness."""
    dataset = load_dataset(in_path, compute=False)
    kind = env_kind or dataset.env
    if kind not in ENV_KINDS:
        raise UsageError("pass --env-kind; the dataset header names no environment")
    phi = _dataset_formula(dataset, spec, kind)
    _print_config({"command": "relabel", "in": in_path, "env_kind": kind, "rule": rule, "spec": format_formula(phi), "out": out})
    trajectories = []
    checked = mismatches = 0
    for traj in dataset.trajectories:
        costs = relabel_costs(traj, kind, rule)
        trajectories.append(traj.with_annotations(relabeled_costs=costs))
        rho = robustness(traj.signal(), 1, phi)
        if abs(rho) <= AUDIT_MARGIN:
            continue
        checked += 1
        mismatches += int((costs.sum() == 0) != (rho > 0.0))
    dataset.trajectories = trajectories
    if dataset.env is None:
        dataset.env = kind
    save_dataset(dataset, out)
    audit = {"type": "AUDIT", "trajectories": len(trajectories), "checked": checked, "mismatches": mismatches}
    click.echo(json.dumps(audit))
    _status(f"relabeled {len(trajectories)} trajectories; {mismatches} audit mismatches", "green" if not mismatches else "yellow")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(), help="Dataset JSONL to read.")
@click.option("--spec", default=None, help="Formula text or file; defaults to the dataset header.")
@click.option("--rule", type=click.Choice(RELABEL_RULES), default="monitor", show_default=True, help=RULE_HELP)
@click.option("--out", required=True, type=click.Path(), help="Dataset JSONL to write.")
@handle_errors
def annotate(in_path: str, spec: Optional[str], rule: str, out: str) -> None:
    """Add prefix/suffix robustness traces, return-to-go and relabeled costs."""
    dataset = load_dataset(in_path, compute=False)
    phi = _dataset_formula(dataset, spec)
    if spec is not None:
        dataset = replace(dataset, spec=_read_spec(spec)[0])
    _print_config({"command": "annotate", "in": in_path, "spec": format_formula(phi), "rule": rule, "out": out})
    with _progress("annotating"):
        dataset = annotate_dataset(dataset, phi, rule)
    save_dataset(dataset, out)
    _status(f"annotated {len(dataset)} trajectories into {out}", "green")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(), help="Dataset JSONL to read.")
@click.option("--spec", default=None, help="Formula text or file; defaults to the dataset header.")
@handle_errors
def describe(in_path: str, spec: Optional[str]) -> None:
    """Print one CSV row per trajectory: reward, cost, suffix, satisfied."""
    dataset = load_dataset(in_path, compute=False)
    phi = _dataset_formula(dataset, spec)
    _print_config({"command": "describe", "in": in_path, "spec": format_formula(phi)})
    rows = summarize_dataset(dataset, phi)
    click.echo("trajectory,length,total_reward,total_cost,suffix,satisfied")
    for row in rows:
        cost = "" if row["total_cost"] is None else repr(row["total_cost"])
        click.echo(
            f"{row['trajectory']},{row['length']},{row['total_reward']!r},{cost},"
            f"{row['suffix']!r},{str(row['satisfied']).lower()}"
        )
    if rows:
        stats = compute_stats(dataset.trajectories, phi)
        _status(f"{stats.n_safe}/{stats.n_trajectories} trajectories satisfy the specification")


def _train_config(config_source: Optional[str], seed: Optional[int], steps: Optional[int], **extra: Any) -> TrainConfig:
    data = load_json(config_source) if config_source else {}
    if not isinstance(data, dict):
        raise UsageError("--config must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    if steps is not None:
        data["steps"] = steps
    data.update(extra)
    return TrainConfig.from_dict(data)


def _run_training(data_path: str, config: TrainConfig, out: str, log: Optional[str], command: str, **shown: Any) -> None:
    dataset = load_dataset(data_path)
    log = log or f"{out}.loss.csv"
    _print_config({"command": command, "data": data_path, "train": config.to_dict(), "out": out, "log": log, **shown})
    with _progress("training") as progress:
        result = train(dataset, config, checkpoint=out, loss_log=log, log_callback=progress)
    last = result.losses[-1]
    _status(f"trained {config.steps} steps; final loss {last['loss']:.4f}; checkpoint {out}", "green")


@main.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(), help="Annotated dataset JSONL.")
@click.option("--config", "config_source", default=None, help="TrainConfig as JSON (file or inline).")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@click.option("--steps", type=int, default=None, help="Overrides the configured step count.")
@click.option("--out", required=True, type=click.Path(), help="Checkpoint file to write.")
@click.option("--log", default=None, type=click.Path(), help="Loss CSV; defaults to <out>.loss.csv.")
@handle_errors
def train_command(
    data_path: str, config_source: Optional[str], seed: Optional[int], steps: Optional[int], out: str, log: Optional[str]
) -> None:
    """Train a conditioned policy on an annotated dataset."""
    config = _train_config(config_source, seed, steps)
    _run_training(data_path, config, out, log, "train")


@main.command()
@click.option("--mode", type=click.Choice(ABLATION_MODES), required=True, help="Token layout to train with.")
@click.option("--data", "data_path", required=True, type=click.Path(), help="Annotated dataset JSONL.")
@click.option("--config", "config_source", default=None, help="TrainConfig as JSON (file or inline).")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@click.option("--steps", type=int, default=None, help="Overrides the configured step count.")
@click.option("--out", required=True, type=click.Path(), help="Checkpoint file to write.")
@click.option("--log", default=None, type=click.Path(), help="Loss CSV; defaults to <out>.loss.csv.")
@handle_errors
def ablate(
    mode: str,
    data_path: str,
    config_source: Optional[str],
    seed: Optional[int],
    steps: Optional[int],
    out: str,
    log: Optional[str],
) -> None:
    """Train with an ablated token layout; bc trains on the safe subset only.

    The checkpoint records its layout, so ``eval`` and ``sweep`` use it as is.
    """
    extra: Dict[str, Any] = {"tokens": list(ablation_tokens(mode))}
    if mode == "bc":
        extra["safe_only"] = True
    config = _train_config(config_source, seed, steps, **extra)
    _run_training(data_path, config, out, log, "ablate", mode=mode)


def _eval_setup(ckpt: str, env_kind: Optional[str], env_config: Optional[str], spec: Optional[str]) -> Tuple[Any, ...]:
    policy, stats, meta = load_policy(ckpt)
    if env_config:
        overrides = load_json(env_config)
        if not isinstance(overrides, dict):
            raise UsageError("--env-config must be a JSON object")
        base = dict(meta.get("env_config") or {})
        base.update(overrides)
        if env_kind:
            base["kind"] = env_kind
        config = EnvConfig.from_dict(base)
    elif meta.get("env_config") and (env_kind is None or env_kind == meta.get("env")):
        config = EnvConfig.from_dict(meta["env_config"])
    elif env_kind or meta.get("env"):
        config = default_env_config(env_kind or meta["env"])
    else:
        raise UsageError("pass --env; the checkpoint names no environment")
    if spec is not None:
        text, phi = _read_spec(spec)
    elif meta.get("spec") and config.kind == meta.get("env"):
        text = meta["spec"]
        phi = parse_formula(text)
    else:
        text = builtin_spec_text(config.kind, config)
        phi = parse_formula(text)
    return policy, stats, config, phi


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(), help="Checkpoint written by train or ablate.")
@click.option("--env", "env_kind", type=click.Choice(ENV_KINDS), default=None, help="Defaults to the training env.")
@click.option("--env-config", default=None, help="EnvConfig overrides as JSON.")
@click.option("--spec", default=None, help="Formula text or file; defaults to the training spec.")
@click.option("--target-reward", type=float, default=None, help="Defaults to the dataset's 90th percentile.")
@click.option("--suffix", default="fixed", show_default=True, help="fixed[:v] | linear[:v] | mean | max.")
@click.option("--episodes", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seeds", default=None, help="Comma-separated evaluation seeds; overrides --seed.")
@click.option("--action-mode", type=click.Choice(ACTION_MODES), default="mean", show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write the report here instead of stdout.")
@handle_errors
def eval_command(
    ckpt: str,
    env_kind: Optional[str],
    env_config: Optional[str],
    spec: Optional[str],
    target_reward: Optional[float],
    suffix: str,
    episodes: int,
    seed: int,
    seeds: Optional[str],
    action_mode: str,
    out: Optional[str],
) -> None:
    """Roll out a checkpoint and print the evaluation report as JSON."""
    policy, stats, config, phi = _eval_setup(ckpt, env_kind, env_config, spec)
    eval_config = EvalConfig(target_reward, suffix, episodes, seed, _parse_seeds(seeds), action_mode).validate()
    _print_config(
        {"command": "eval", "ckpt": ckpt, "env": config.to_dict(), "spec": format_formula(phi), "eval": eval_config.to_dict()}
    )
    with _progress("evaluating") as progress:
        report = rollout(policy, config, phi, eval_config, stats, log_callback=progress)
    text = json.dumps(report.to_dict(), sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)
    _status(f"satisfaction rate {report.satisfaction_rate:.3f} over {len(report.episodes)} episodes", "green")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Checkpoint written by train or ablate.")
@click.option("--grid", "grid_source", required=True, help="Grid JSON (file or inline).")
@click.option("--env", "env_kind", type=click.Choice(ENV_KINDS), default=None, help="Defaults to the training env.")
@click.option("--env-config", default=None, help="EnvConfig overrides as JSON.")
@click.option("--spec", default=None, help="Formula text or file; defaults to the training spec.")
@click.option("--episodes", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seeds", default=None, help="Comma-separated evaluation seeds; overrides --seed.")
@click.option("--action-mode", type=click.Choice(ACTION_MODES), default="mean", show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write the CSV here instead of stdout.")
@handle_errors
def sweep(
    ckpt: str,
    grid_source: str,
    env_kind: Optional[str],
    env_config: Optional[str],
    spec: Optional[str],
    episodes: int,
    seed: int,
    seeds: Optional[str],
    action_mode: str,
    out: Optional[str],
) -> None:
    """Sweep target reward and fixed target suffix; print the alignment CSV."""
    policy, stats, config, phi = _eval_setup(ckpt, env_kind, env_config, spec)
    grid = parse_grid(load_json(grid_source))
    eval_config = EvalConfig(None, "fixed", episodes, seed, _parse_seeds(seeds), action_mode).validate()
    _print_config(
        {
            "command": "sweep",
            "ckpt": ckpt,
            "env": config.to_dict(),
            "spec": format_formula(phi),
            "grid": [list(cell) for cell in grid],
            "eval": eval_config.to_dict(),
        }
    )
    with _progress("sweeping") as progress:
        rows = alignment_sweep(policy, config, phi, grid, eval_config, stats, log_callback=progress)
    buffer = io.StringIO()
    write_sweep_csv(rows, buffer)
    if out:
        Path(out).write_text(buffer.getvalue(), encoding="utf-8")
    else:
        click.echo(buffer.getvalue(), nl=False)
    if len({row["target_suffix"] for row in rows}) > 1:
        _status(f"# alignment spearman {suffix_alignment(rows):.4f}")


@main.command()
@click.option("--spec", required=True, help="Formula text or file.")
@click.option("--label", "labels", multiple=True, required=True, help="Predicate label to rescale; repeatable.")
@click.option("--alpha", type=float, required=True, help="Positive scale factor.")
@handle_errors
def scale(spec: str, labels: Tuple[str, ...], alpha: float) -> None:
    """Print the formula with the labeled predicates rescaled by ALPHA."""
    _, phi = _read_spec(spec)
    _print_config({"command": "scale", "spec": format_formula(phi), "labels": list(labels), "alpha": alpha})
    click.echo(format_formula(scale_predicate(phi, labels, alpha)))


if __name__ == "__main__":
    main()

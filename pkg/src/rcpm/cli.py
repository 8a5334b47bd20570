"""Command-line interface: ``rcpm train | density | geodesics | sample | gradcheck | verify``.

Exit codes: 0 success, 1 usage or I/O error (or a failed check), 2 numerical
abort.  Every command that writes files also writes ``manifest.json`` next
to them.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import subprocess
import sys
import tempfile
import time
import warnings
from pathlib import Path

import click
import numpy as np

import rcpm
from rcpm.densities import density_from_json
from rcpm.errors import ConfigError, NonFiniteLossError, RCPMError
from rcpm.flow import Flow, PushedDensity, flow_forward, invert_flow, transport_geodesic
from rcpm.manifold import Sphere
from rcpm.potential import DiscretePotential

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class CommandError(Exception):
    """Usage or I/O problem reported with exit code 1."""


# ---------------------------------------------------------------------------
# plumbing


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows, footer=()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    for line in footer:
        buf.write(f"# {line}\n")
    return buf.getvalue()


def version_string() -> str:
    """Package version, plus ``git describe`` when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{rcpm.__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return rcpm.__version__


def write_manifest(directory, command: str, config_path=None, seed=None, started: float | None = None, **extra):
    data = {
        "command": command,
        "argv": sys.argv[1:],
        "config": str(config_path) if config_path is not None else None,
        "seed": seed,
        "output_dir": str(Path(directory).resolve()),
        "version": version_string(),
        "wallclock_seconds": time.perf_counter() - started if started is not None else None,
        **extra,
    }
    atomic_write(Path(directory) / "manifest.json", json.dumps(data, indent=1, sort_keys=True) + "\n")


def _load_model(path) -> Flow:
    try:
        return Flow.load(path)
    except FileNotFoundError:
        raise CommandError(f"model file not found: {path}") from None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"cannot read model {path}: {exc}") from None


def _model_base(f: Flow):
    """The base density recorded in the model metadata (uniform if absent)."""
    spec = f.meta.get("config", {}).get("base", {"kind": "uniform"})
    return density_from_json(spec, f.manifold)


def _load_config(path, **overrides):
    from rcpm.training import TrainConfig

    if not Path(path).is_file():
        raise CommandError(f"config file not found: {path}")
    cfg = TrainConfig.load(path)
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _chart_names(manifold) -> list[str]:
    names = []
    for i, f in enumerate(manifold.factors):
        tag = "" if len(manifold.factors) == 1 else str(i + 1)
        names.extend([f"t{tag}"] if f.n == 1 else [f"theta{tag}", f"phi{tag}"])
    return names


def _run(fn):
    """Map library exceptions onto the exit-code contract."""
    try:
        code = fn()
    except NonFiniteLossError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except (CommandError, ConfigError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except RCPMError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


def _finish(code):
    sys.exit(code)


# ---------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(rcpm.__version__, prog_name="rcpm")
def main():
    """Riemannian convex potential flows on spheres and tori."""


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="TrainConfig JSON file.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--loss", type=click.Choice(["kl", "nll"]), default=None, help="Override the config loss.")
@click.option("--quiet", is_flag=True, help="No progress lines.")
def cmd_train(config_path, out_dir, seed, loss, quiet):
    """Train a flow; writes model.json, trace.csv, eval.json and manifest.json."""

    def run():
        from rcpm.training import train

        started = time.perf_counter()
        cfg = _load_config(config_path, seed=seed, loss=loss)
        every = max(1, cfg.steps // 20)

        def progress(step, value):
            if not quiet and (step % every == 0 or step == cfg.steps - 1):
                click.echo(f"step {step:6d}  loss {value:.6f}", err=True)

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = train(cfg, progress=progress)
        for w in caught:
            click.echo(f"warning: {w.message}", err=True)
        out = Path(out_dir)
        atomic_write(out / "model.json", result.flow.dumps() + "\n")
        rows = [(r.step, repr(r.loss), f"{r.wallclock:.6f}", int(r.skipped), r.rejected) for r in result.trace]
        atomic_write(out / "trace.csv", _csv_text(["step", "loss", "wallclock", "skipped", "rejected"], rows))
        atomic_write(out / "eval.json", result.report.dumps() + "\n")
        write_manifest(out, "train", config_path, cfg.seed, started, warnings=result.warnings)
        click.echo(result.report.dumps())

    _finish(_run(run))


@main.command("density")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--grid", "res", type=click.IntRange(min=1), default=100, show_default=True, help="Chart resolution R.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--binarize", is_flag=True, help="Write 1 where the density exceeds the uniform density, else 0.")
def cmd_density(model_path, res, out_path, binarize):
    """Model density on a chart grid (S^2: R colatitudes by 2R longitudes)."""

    def run():
        started = time.perf_counter()
        f = _load_model(model_path)
        m = f.manifold
        angles, pts, w = m.chart_grid(res)
        dens = np.exp(PushedDensity(_model_base(f), f).log_density(pts, cut="evaluate"))
        ok = np.isfinite(dens)
        integral = float(np.sum(dens[ok] * w[ok]))
        values = (dens >= 1.0 / m.volume).astype(int) if binarize else dens
        rows = [[*map(repr, a.tolist()), v if binarize else repr(float(v))] for a, v in zip(angles, values)]
        footer = [f"quadrature_integral={integral!r}", f"unresolved_points={int(np.sum(~ok))}"]
        atomic_write(out_path, _csv_text([*_chart_names(m), "density"], rows, footer))
        write_manifest(Path(out_path).parent, "density", started=started, model=str(model_path), grid=res)
        click.echo(json.dumps({"quadrature_integral": integral, "unresolved_points": int(np.sum(~ok))}))

    _finish(_run(run))


@main.command("geodesics")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--grid-starts", "starts", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_geodesics(model_path, starts, steps, out_path):
    """Transport geodesics exp_x(-l grad phi(x)) of a single-block model from a grid of starts."""

    def run():
        started = time.perf_counter()
        f = _load_model(model_path)
        if f.T != 1:
            raise CommandError(
                f"the model has {f.T} blocks; transport geodesics are exact only for single-block maps"
            )
        b = f.blocks[0]
        _, pts, _ = f.manifold.chart_grid(starts)
        D = f.manifold.ambient_dim
        rows = []
        for i, x in enumerate(pts):
            line = transport_geodesic(b, x, steps)
            rows.extend([i, k, *map(repr, p.tolist())] for k, p in enumerate(line))
        atomic_write(out_path, _csv_text(["start", "step", *[f"x{j}" for j in range(D)]], rows))
        write_manifest(Path(out_path).parent, "geodesics", started=started, model=str(model_path))

    _finish(_run(run))


@main.command("sample")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("-n", "n", type=click.IntRange(min=1), required=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_sample(model_path, n, out_path, seed):
    """Draw n samples with their model log-densities."""

    def run():
        started = time.perf_counter()
        f = _load_model(model_path)
        base = _model_base(f)
        rng = np.random.default_rng(seed)
        if f.direction == "forward":
            res = PushedDensity(base, f).sample(rng, n)
            pts, logp = res.points, res.log_density
        else:
            z = base.sample(rng, n)
            inv = invert_flow(f, z)
            _, logabs, _, _ = flow_forward(f, inv.points)
            pts = inv.points
            logp = np.where(inv.converged, np.asarray(base.log_density(z)) + logabs, np.nan)
        D = f.manifold.ambient_dim
        rows = [[*map(repr, p.tolist()), repr(float(lp))] for p, lp in zip(pts, logp)]
        atomic_write(out_path, _csv_text([*[f"x{j}" for j in range(D)], "log_density"], rows))
        write_manifest(Path(out_path).parent, "sample", seed=seed, started=started, model=str(model_path), n=n)

    _finish(_run(run))


@main.command("gradcheck")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--batch", "batch_size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Also write the report here.")
def cmd_gradcheck(config_path, seed, batch_size, out_path):
    """Compare engine gradients with finite differences on the initial flow of a config."""

    def run():
        from rcpm.diffengine import grad_check
        from rcpm.training import init_flow, loss_spec

        started = time.perf_counter()
        cfg = _load_config(config_path, seed=seed)
        m, base, target = cfg.build()
        rng = np.random.default_rng(cfg.seed)
        f = init_flow(cfg, m, rng)
        source = base if cfg.loss == "kl" else target
        report = grad_check(f, loss_spec(cfg, base, target), source.sample(rng, batch_size))
        text = report.dumps()
        if out_path:
            atomic_write(out_path, text + "\n")
            write_manifest(Path(out_path).parent, "gradcheck", config_path, cfg.seed, started)
        click.echo(text)
        return EXIT_OK if report.passed else EXIT_USAGE

    _finish(_run(run))


# ---------------------------------------------------------------------------
# verification oracles


def _circle_target(components: int, seed: int, offset: float = 0.0) -> DiscretePotential:
    """Random hard discrete potential on ``S^1`` used by the grid oracles."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 2 * math.pi, components)
    return DiscretePotential(Sphere(1), np.stack([np.cos(t), np.sin(t)], -1), rng.uniform(0, 1, components) + offset, 0.0)


ORACLES = ("involution", "epsilon-net", "gradient-convergence", "pushforward", "logdet-audit")


@main.command("verify")
@click.argument("name", type=click.Choice(ORACLES))
@click.option("--res", type=click.IntRange(min=16), default=512, show_default=True, help="Grid resolution (involution).")
@click.option("--components", type=click.IntRange(min=1), default=5, show_default=True, help="Pieces of the S^1 target.")
@click.option("--sizes", default="16,64,256,1024", show_default=True, help="Net sizes (epsilon-net, gradient-convergence).")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), default=None, help="Flow (pushforward, logdet-audit).")
@click.option("--target", "target_json", default=None, help="Target density JSON (pushforward); default: the model's.")
@click.option("-n", "n", type=click.IntRange(min=1), default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def cmd_verify(name, res, components, sizes, model_path, target_json, n, seed, out_path):
    """Run one verification oracle and print its JSON report."""

    def run():
        from rcpm import verify as V

        started = time.perf_counter()
        try:
            net_sizes = [int(s) for s in sizes.split(",") if s.strip()]
        except ValueError:
            raise CommandError(f"--sizes must be a comma-separated list of integers, got {sizes!r}") from None
        if name == "involution":
            report = V.involution_check(_circle_target(components, seed), res)
        elif name == "epsilon-net":
            report = V.epsilon_net_approximation(_circle_target(components, seed), net_sizes)
        elif name == "gradient-convergence":
            report = V.gradient_convergence(_circle_target(components, seed), net_sizes, rng=np.random.default_rng(seed))
        else:
            if model_path is None:
                raise CommandError(f"verify {name} needs --model")
            f = _load_model(model_path)
            if name == "logdet-audit":
                report = V.logdet_positivity_audit(f, n, seed)
            else:
                spec = json.loads(target_json) if target_json else f.meta.get("config", {}).get("target")
                if spec is None:
                    raise CommandError("no target density: pass --target")
                target = density_from_json(spec, f.manifold)
                report = V.pushforward_check(f, _model_base(f), target, n=max(n, 100_000), seed=seed)
        text = report.dumps()
        if out_path:
            atomic_write(out_path, text + "\n")
            write_manifest(Path(out_path).parent, f"verify {name}", seed=seed, started=started)
        click.echo(text)
        passed = getattr(report, "passed", getattr(report, "all_positive", True))
        return EXIT_OK if passed else EXIT_USAGE

    _finish(_run(run))


if __name__ == "__main__":  # pragma: no cover
    main()

"""
Command-line driver for layerspec.

Subcommands: levels, qeval, dispersion, bands, oracle, report. Every run
reads one JSON configuration file (see mds/config_format.md) and writes
CSV tables plus a manifest.json into the output directory.
"""

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bloch import BlochControl, QuasiMomentum, fiber_model
from .errors import ConfigError, ConvergenceError, NonGenericError, PoleError
from .greens import SeriesControl
from .model import CouplingMatrix, Impurity, ImpuritySet, LayerGeometry, ModelConfig, PlanarLattice
from .oracle import OracleControl, containment_verdict, fill_distance, finite_eigenvalues, hausdorff_distance
from .solver import (
    SolverControl,
    classify_multiplicity,
    full_spectrum,
    gap_preservation_check,
    generation_counts,
    generic_gate,
    scan_torus,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

_SECTIONS = {"geometry", "lattice", "impurities", "coupling", "numerics", "output"}
_NUMERIC_KEYS = {
    "abs_tol", "n_max", "tail_mode", "grid", "multiplicity_grid", "E_max", "max_denominator",
    "oracle_R", "oracle_gap", "rank_tol", "m_window", "lattice_radius", "root_tol", "energy_tol",
    "degen_tol", "probe_offset", "coverage_limit", "margin_fraction", "z_samples", "qeval_p", "qeval_z",
}


def _reject_unknown(section: str, given: dict, allowed: set):
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def _parse_coupling(raw: dict) -> CouplingMatrix:
    _reject_unknown("coupling", raw, {"kind", "alphas", "blocks", "c1", "c2"})
    kind = raw.get("kind", "diagonal")
    if kind == "diagonal":
        return CouplingMatrix.diagonal(raw.get("alphas", []))
    if kind != "general":
        raise ConfigError(f"unknown coupling kind: {kind}")
    blocks = {}
    for block in raw.get("blocks", []):
        _reject_unknown("coupling.blocks", block, {"displacement", "real", "imag"})
        real = np.asarray(block["real"], dtype=float)
        imag = np.asarray(block.get("imag", np.zeros_like(real)), dtype=float)
        blocks[tuple(int(v) for v in block["displacement"])] = real + 1j * imag
    return CouplingMatrix.hopping(blocks, c1=raw.get("c1"), c2=raw.get("c2"))


@dataclass
class RunConfig:
    """Everything one CLI run needs, parsed and validated from a JSON file."""

    model: ModelConfig
    series: SeriesControl = field(default_factory=SeriesControl)
    bloch: BlochControl = field(default_factory=BlochControl)
    solver: SolverControl = field(default_factory=SolverControl)
    oracle: OracleControl = field(default_factory=OracleControl)
    E_max: float = 60.0
    grid: tuple[int, int] = (16, 16)
    multiplicity_grid: tuple[int, int] = (4, 4)
    oracle_radii: tuple[int, ...] = (1, 2, 3)
    oracle_gap: int = 0
    qeval_p: tuple[float, float] = (0.1372, 0.6181)
    qeval_z: float | None = None
    out_dir: Path = Path("out")
    formats: tuple[str, ...] = ("csv", "json")
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        _reject_unknown("top level", raw, _SECTIONS)
        try:
            geometry = raw["geometry"]
            _reject_unknown("geometry", geometry, {"d", "B", "B_over_pi"})
            if "B" in geometry and "B_over_pi" in geometry:
                raise ConfigError("give either B or B_over_pi, not both")
            B = geometry["B"] if "B" in geometry else math.pi * geometry["B_over_pi"]
            geom = LayerGeometry(d=float(geometry["d"]), B=float(B))

            lattice = raw.get("lattice", {})
            _reject_unknown("lattice", lattice, {"a1", "b1", "b2"})
            lat = PlanarLattice(a1=float(lattice.get("a1", 1.0)), b1=float(lattice.get("b1", 0.0)),
                                b2=float(lattice.get("b2", 1.0)))

            points = []
            for item in raw["impurities"]:
                _reject_unknown("impurities", item, {"s", "t", "kappa3"})
                points.append(Impurity(s=float(item["s"]), t=float(item["t"]), kappa3=float(item["kappa3"])))
            coupling = _parse_coupling(raw["coupling"])
        except KeyError as exc:
            raise ConfigError(f"missing configuration key: {exc}") from exc

        numerics = raw.get("numerics", {})
        _reject_unknown("numerics", numerics, _NUMERIC_KEYS)
        output = raw.get("output", {})
        _reject_unknown("output", output, {"directory", "formats"})
        formats = tuple(output.get("formats", ("csv", "json")))
        if not formats or set(formats) - {"csv", "json"}:
            raise ConfigError(f"output formats must be a non-empty subset of csv, json, got {list(formats)}")

        model = ModelConfig(
            geometry=geom,
            lattice=lat,
            impurities=ImpuritySet(points=tuple(points)),
            coupling=coupling,
            max_denominator=int(numerics.get("max_denominator", 1000)),
        )
        series = SeriesControl(
            abs_tol=float(numerics.get("abs_tol", 1e-12)),
            n_max=int(numerics.get("n_max", 65536)),
            tail_mode=numerics.get("tail_mode", "accelerated"),
        )
        bloch = BlochControl(
            rank_tol=float(numerics.get("rank_tol", 1e-9)),
            m_window=float(numerics.get("m_window", 9.0)),
            lattice_radius=numerics.get("lattice_radius"),
        )
        solver = SolverControl(
            root_tol=float(numerics.get("root_tol", 1e-10)),
            energy_tol=float(numerics.get("energy_tol", 1e-10)),
            degen_tol=float(numerics.get("degen_tol", 1e-6)),
            probe_offset=float(numerics.get("probe_offset", 1e-6)),
            coverage_limit=float(numerics.get("coverage_limit", 0.2)),
        )
        oracle = OracleControl(
            z_samples=int(numerics.get("z_samples", 200)),
            margin_fraction=float(numerics.get("margin_fraction", 0.05)),
        )
        radii = numerics.get("oracle_R", [1, 2, 3])
        if isinstance(radii, int):
            radii = [radii]
        return cls(
            model=model,
            series=series,
            bloch=bloch,
            solver=solver,
            oracle=oracle,
            E_max=float(numerics.get("E_max", 60.0)),
            grid=tuple(int(g) for g in numerics.get("grid", (16, 16))),
            multiplicity_grid=tuple(int(g) for g in numerics.get("multiplicity_grid", (4, 4))),
            oracle_radii=tuple(int(r) for r in radii),
            oracle_gap=int(numerics.get("oracle_gap", 0)),
            qeval_p=tuple(float(v) for v in numerics.get("qeval_p", (0.1372, 0.6181))),
            qeval_z=numerics.get("qeval_z"),
            out_dir=Path(output.get("directory", "out")),
            formats=formats,
            raw=raw,
        )

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(raw)

    def controls(self) -> dict:
        """All numeric controls that affect results, for the manifest."""
        return {
            "series": asdict(self.series),
            "bloch": asdict(self.bloch),
            "solver": asdict(self.solver),
            "oracle": asdict(self.oracle),
            "E_max": self.E_max,
            "grid": list(self.grid),
            "multiplicity_grid": list(self.multiplicity_grid),
            "oracle_R": list(self.oracle_radii),
            "oracle_gap": self.oracle_gap,
            "max_denominator": self.model.max_denominator,
        }


class SpectrumPipeline:
    """Runs the CLI subcommands against one RunConfig"""

    def __init__(self, run: RunConfig, jobs: int = 1, strict: bool = False):
        self.run = run
        self.jobs = jobs
        self.strict = strict
        self.model = fiber_model(run.model, run.series, run.bloch)
        self.levels = run.model.levels(run.E_max)
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        run.out_dir.mkdir(parents=True, exist_ok=True)

    def _save_csv(self, df: pd.DataFrame, name: str):
        if "csv" not in self.run.formats:
            logger.debug(f"Skipping {name}: csv output disabled")
            return
        path = self.run.out_dir / name
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        self.outputs.append(name)
        logger.info(f"Saved {len(df)} rows to {path}")

    def _save_json(self, payload: dict, name: str, always: bool = False):
        if not always and "json" not in self.run.formats:
            logger.debug(f"Skipping {name}: json output disabled")
            return
        path = self.run.out_dir / name
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
        self.outputs.append(name)
        logger.info(f"Saved {path}")

    def _timed(self, label: str, func, *args):
        start = time.time()
        result = func(*args)
        self.timings[label] = round(time.time() - start, 3)
        return result

    def write_manifest(self, command: str):
        self._save_json({
            "command": command,
            "version": __version__,
            "config": self.run.raw,
            "controls": self.run.controls(),
            "flux": asdict(self.run.model.flux),
            "timings": self.timings,
            "outputs": list(self.outputs),
        }, "manifest.json", always=True)

    def levels_table(self) -> pd.DataFrame:
        rows = []
        for index, energy in enumerate(self.levels.levels):
            rows.append({
                "index": index,
                "energy": energy,
                "pairs": ";".join(f"({l},{n})" for l, n in self.levels.pairs(index)),
                "orphan": self.levels.orphan[index],
            })
        return pd.DataFrame(rows, columns=["index", "energy", "pairs", "orphan"])

    def cmd_levels(self) -> pd.DataFrame:
        df = self.levels_table()
        self._save_csv(df, "levels.csv")
        return df

    def cmd_qeval(self, p: tuple[float, float], z: float) -> dict:
        try:
            result = self.model.qtilde(QuasiMomentum(p[0], p[1]), z)
        except PoleError as exc:
            logger.error(f"qeval at z={z} hits the level {exc.level}")
            raise
        defect = result.hermiticity_defect()
        payload = {
            "p": list(p),
            "z": z,
            "qtilde": {"real": result.q.real.tolist(), "imag": result.q.imag.tolist()},
            "a_tilde": {"real": result.a.real.tolist(), "imag": result.a.imag.tolist()},
            "eigenvalues": result.eigenvalues().tolist(),
            "hermitian": defect <= 1e-10,
            "hermiticity_defect": defect,
            "lattice_radius": result.lattice_radius,
            "lattice_terms": result.n_lattice_terms,
            "abs_tol": self.run.series.abs_tol,
        }
        self._save_json(payload, "qeval.json")
        return payload

    def _scan(self):
        generation = self._timed("generation", generation_counts, self.model, self.levels, self.run.solver)
        surfaces = self._timed(
            "scan", scan_torus, self.model, self.levels, self.run.grid, self.run.solver, self.jobs, generation
        )
        return generation, surfaces

    def _surfaces_table(self, surfaces) -> pd.DataFrame:
        rows = []
        for band_id, surface in enumerate(surfaces):
            for a, p1 in enumerate(surface.p1):
                for b, p2 in enumerate(surface.p2):
                    rows.append({
                        "band_id": band_id,
                        "level_index": surface.interval.level_index,
                        "slot": surface.interval.slot,
                        "interval_hi": surface.interval.hi,
                        "p1": p1,
                        "p2": p2,
                        "E": surface.values[a, b],
                        "status": surface.status[a, b],
                    })
        return pd.DataFrame(rows)

    def cmd_dispersion(self):
        _, surfaces = self._scan()
        self._save_csv(self._surfaces_table(surfaces), "surfaces.csv")
        return surfaces

    def _check_gate(self):
        gate = generic_gate(self.model, self.levels, self.run.solver)
        failed = [g for g in gate if not g.passed]
        if failed and self.strict:
            raise NonGenericError(f"generic-case gate failed at levels {[g.level_index for g in failed]}")
        return gate

    def cmd_bands(self):
        logger.info("=" * 60)
        logger.info("BAND STRUCTURE - START")
        logger.info("=" * 60)
        self._check_gate()
        structure, _ = self._timed(
            "bands", full_spectrum, self.run.model, self.run.E_max, self.run.grid, self.run.solver,
            self.run.series, self.run.bloch, self.jobs, self.run.multiplicity_grid,
        )
        surfaces = structure.surfaces

        self._save_csv(pd.DataFrame([{
            "band_id": band.band_id,
            "E_min": band.e_min,
            "E_max": band.e_max,
            "degeneracy": band.degeneracy,
            "interval_lo": band.interval.lo,
            "interval_hi": band.interval.hi,
            "level_index": band.interval.level_index,
            "slot": band.interval.slot,
            "degenerate": band.degenerate_point,
        } for band in structure.bands]), "bands.csv")
        self._save_csv(self._surfaces_table(surfaces), "surfaces.csv")
        self._save_csv(pd.DataFrame([{
            "level_index": lv.level_index,
            "energy": lv.energy,
            "persists": lv.persists,
            "orphan": lv.orphan,
            "fraction": lv.fraction,
            "cases": ";".join(f"{case}:{count}" for case, count in lv.cases),
        } for lv in structure.point_spectrum]), "point_spectrum.csv")
        return structure

    def _surfaces_current(self) -> bool:
        """Whether surfaces.csv in the output directory came from this configuration and these controls."""
        manifest_path = self.run.out_dir / "manifest.json"
        if not (self.run.out_dir / "surfaces.csv").exists() or not manifest_path.exists():
            return False
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError):
            return False
        controls = json.loads(json.dumps(self.run.controls()))
        return (
            "surfaces.csv" in manifest.get("outputs", [])
            and manifest.get("config") == self.run.raw
            and manifest.get("controls") == controls
        )

    def _band_values(self, level: float) -> np.ndarray:
        """Dispersion values of the bands whose interval ends at `level`.

        surfaces.csv is reused only when the manifest beside it records the
        same configuration and controls; otherwise the torus is scanned again.
        """
        if self._surfaces_current():
            logger.info("Reusing surfaces.csv from a matching run")
            table = pd.read_csv(self.run.out_dir / "surfaces.csv")
            owned = table[table["interval_hi"] == level]["E"].to_numpy(dtype=float)
            if len(owned):
                return owned[np.isfinite(owned)]
        _, surfaces = self._scan()
        owned = [s.values[np.isfinite(s.values)] for s in surfaces if s.interval.hi == level]
        return np.concatenate(owned) if owned else np.array([])

    def cmd_oracle(self, radii: tuple[int, ...], gap_index: int) -> dict:
        if not 0 <= gap_index < len(self.levels):
            raise ConfigError(f"gap index {gap_index} outside the level table")
        hi = self.levels.levels[gap_index]
        lo = -math.inf if gap_index == 0 else self.levels.levels[gap_index - 1]
        values = self._band_values(hi)
        hull = (float(values.min()), float(values.max())) if len(values) else None
        verdicts = []
        for R in radii:
            cloud = self._timed(f"oracle_R{R}", finite_eigenvalues, R, (lo, hi), self.run.model,
                                self.run.series, self.run.oracle)
            self._save_csv(pd.DataFrame({"index": range(len(cloud)), "energy": list(cloud.eigenvalues)}),
                           f"cloud_R{R}.csv")
            entry = {"R": R, "sites": cloud.sites, "eigenvalues": len(cloud)}
            if hull is not None:
                entry["verdict"] = containment_verdict(cloud, hull[0], hull[1], self.run.oracle)
                entry["fill_distance"] = fill_distance(values, cloud)
                entry["hausdorff_distance"] = hausdorff_distance(values, cloud)
            verdicts.append(entry)
        payload = {"gap_index": gap_index, "gap": [lo if math.isfinite(lo) else None, hi],
                   "band_hull": list(hull) if hull else None, "clouds": verdicts}
        self._save_json(payload, "oracle.json")
        return payload

    def cmd_report(self) -> dict:
        gate = self._check_gate()
        report = self._timed(
            "multiplicity", classify_multiplicity, self.model, self.levels, self.run.multiplicity_grid, self.run.solver
        )
        self._save_csv(pd.DataFrame([{
            "level_index": e.level_index,
            "level": e.level,
            "p1": e.p.p1,
            "p2": e.p.p2,
            "case": e.case,
            "rank": e.rank,
            "d": e.d,
            "d_lo": e.d_bounds[0],
            "d_hi": e.d_bounds[1],
            "d_invertible": e.d_invertible,
        } for e in report.entries]), "multiplicity.csv")
        preservation = [
            asdict(gap_preservation_check(self.model, index, self.levels, self.run.multiplicity_grid, self.run.solver))
            for index, orphan in enumerate(self.levels.orphan)
            if orphan and index > 0
        ]
        payload = {
            "gate": [dict(asdict(g), passed=g.passed) for g in gate],
            "gap_preservation": preservation,
        }
        self._save_json(payload, "report.json")
        return payload

    def run_command(self, command: str, args: argparse.Namespace):
        start = time.time()
        try:
            if command == "levels":
                self.cmd_levels()
            elif command == "qeval":
                z = args.z if args.z is not None else self.run.qeval_z
                if z is None:
                    z = self.levels.levels[0] - self.run.model.geometry.abs_b
                p = (args.p1, args.p2) if args.p1 is not None else self.run.qeval_p
                self.cmd_qeval(p, float(z))
            elif command == "dispersion":
                self.cmd_dispersion()
            elif command == "bands":
                self.cmd_bands()
            elif command == "oracle":
                radii = tuple(args.radius) if args.radius else self.run.oracle_radii
                gap = args.gap_index if args.gap_index is not None else self.run.oracle_gap
                self.cmd_oracle(radii, gap)
            elif command == "report":
                self.cmd_report()
            self.timings["total"] = round(time.time() - start, 3)
            self.write_manifest(command)
        except Exception as e:
            logger.error(f"{command} failed: {e}", exc_info=True)
            raise


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON configuration file")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for torus scans")
    common.add_argument("--strict", action="store_true", help="fail when the generic-case gate fails")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")

    parser = argparse.ArgumentParser(prog="layerspec", description="Spectra of magnetic layers with point-interaction lattices")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("levels", parents=[common], help="modified Landau levels up to E_max")
    qeval = sub.add_parser("qeval", parents=[common], help="fiber matrix at one (p, z)")
    qeval.add_argument("--p1", type=float, default=None, help="quasi-momentum, given together with --p2")
    qeval.add_argument("--p2", type=float, default=None, help="quasi-momentum, given together with --p1")
    qeval.add_argument("--z", type=float, default=None)
    sub.add_parser("dispersion", parents=[common], help="dispersion surfaces over the torus grid")
    sub.add_parser("bands", parents=[common], help="band structure, surfaces and point spectrum")
    oracle = sub.add_parser("oracle", parents=[common], help="finite-lattice eigenvalue clouds")
    oracle.add_argument("--radius", type=int, action="append", default=None)
    oracle.add_argument("--gap-index", type=int, default=None)
    sub.add_parser("report", parents=[common], help="multiplicities, generic-case gate, preserved gaps")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point"""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "qeval" and (args.p1 is None) != (args.p2 is None):
        parser.error("--p1 and --p2 must be given together")
    try:
        run = RunConfig.from_file(args.config)
        if args.out:
            run.out_dir = Path(args.out)
        pipeline = SpectrumPipeline(run, jobs=args.jobs, strict=args.strict)
        pipeline.run_command(args.command, args)
    except NonGenericError as exc:
        logger.error(f"Non-generic configuration: {exc}")
        return 4
    except ConfigError as exc:
        logger.error(f"Configuration error: {exc}")
        return 2
    except (ConvergenceError, PoleError) as exc:
        logger.error(f"Numerical failure: {exc}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

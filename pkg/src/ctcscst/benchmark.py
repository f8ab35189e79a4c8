"""ML-only vs joint training on a fixed synthetic corpus, over several training seeds."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from .synthdata import SynthSpec, generate_corpus, make_alphabet
from .trainer import TrainConfig, evaluate, train

DESK_SCALE = Path(__file__).resolve().parents[2] / "benchmarks" / "desk_scale"


@dataclass
class SeedResult:
    seed: int
    ml_wer: float
    joint_wer: float

    @property
    def relative_improvement(self) -> float:
        return (self.ml_wer - self.joint_wer) / self.ml_wer if self.ml_wer > 0 else 0.0


def heldout_wer(splits, alphabet, config: TrainConfig) -> float:
    state, _ = train(splits["train"], splits["val"], alphabet, config)
    return evaluate(state.params, splits["test"], alphabet, batch_size=config.batch_size)["wer"]


def compare(bench_dir: str | Path = DESK_SCALE, seeds=range(5)) -> dict:
    bench_dir = Path(bench_dir)
    spec = SynthSpec.load(bench_dir / "synth_spec.json")
    ml = json.loads((bench_dir / "train_ml.json").read_text())
    joint = json.loads((bench_dir / "train_joint.json").read_text())
    start = time.perf_counter()
    splits, _ = generate_corpus(spec)
    alphabet = make_alphabet(spec)
    results = []
    for seed in seeds:
        results.append(
            SeedResult(
                seed,
                heldout_wer(splits, alphabet, TrainConfig.from_dict({**ml, "seed": seed})),
                heldout_wer(splits, alphabet, TrainConfig.from_dict({**joint, "seed": seed})),
            )
        )
    return {
        "results": results,
        "wins": sum(r.joint_wer <= r.ml_wer for r in results),
        "median_relative_improvement": statistics.median(r.relative_improvement for r in results),
        "seconds": time.perf_counter() - start,
    }


def main() -> None:
    out = compare()
    print(f"{'seed':>4} {'ml wer':>8} {'joint wer':>9} {'rel impr':>8}")
    for r in out["results"]:
        print(f"{r.seed:>4} {r.ml_wer:8.4f} {r.joint_wer:9.4f} {r.relative_improvement:8.2%}")
    print(f"joint <= ml on {out['wins']}/{len(out['results'])} seeds, "
          f"median relative improvement {out['median_relative_improvement']:.2%}, {out['seconds']:.0f}s")


if __name__ == "__main__":
    main()

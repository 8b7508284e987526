"""Example usage of py-fedpoison: a clean run, then LF and FP at 10% on client 1."""

import functools
from pathlib import Path

from py_fedpoison import (
    AttackKind,
    AttackSpec,
    EventLog,
    FederationConfig,
    ForestConfig,
    StreamName,
    SyntheticSpec,
    TrainConfig,
    gen_synthetic,
    run_experiment,
    scenario_id,
    select_target_feature,
    split,
)
from py_fedpoison.report import build_record, export_csv


def main() -> None:
    # 5000 rows, 8 features, only feature 3 depends on the label
    data = gen_synthetic(SyntheticSpec(n=5000, d=8, informative_feature=3, seed=0))
    bundle = split(data, seed=0)
    print(f"Clients: {[shard.n for shard in bundle.client_shards]}")

    cfg = FederationConfig(
        rounds=10,
        train=TrainConfig(batch_size=250, learning_rate=0.0099, hidden_sizes=(256, 128)),
        seed=0,
        client_workers=2,
        forest=ForestConfig(n_trees=20, seed=1),
    )

    feature, report = select_target_feature(bundle.train, bundle.validation, cfg.forest)
    print(f"FP target: feature {feature} ({report.feature_names[feature]})")

    attacks = [
        None,
        AttackSpec(kind=AttackKind.LF, percent=10, seed=1),
        AttackSpec(kind=AttackKind.FP, percent=10, feature_index=feature, seed=2),
    ]
    records = []
    with EventLog(Path("example-run") / "events", echo=True) as events:
        for attack in attacks:
            sid = scenario_id("SYN", attack)
            stream = StreamName.for_experiment(sid, attack.percent if attack else None)
            sink = functools.partial(events.append_to_stream, stream)
            outcome = run_experiment(bundle, attack, cfg, event_sink=sink)
            records.append(build_record(outcome, "SYN", attack, seed=0))

    for record in records:
        print(f"{record.scenario_id:18} acc={record.server_accuracy:.4f} asr={record.asr}")
    export_csv(records, Path("example-run") / "results.csv")


if __name__ == "__main__":
    main()

"""Quick end-to-end check of the Python bindings on a tiny synthetic world."""

import json
import math
import sys
import tempfile
from pathlib import Path

import shiftgrid as sg


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        raw = Path(tmp) / "raw"
        cfg = {"n_individuals": 66, "world_m": 40, "world_n": 40, "pre_days": 6, "post_days": 2, "seed": 3}
        train_ids, val_ids, test_ids = sg.generate_synthetic(str(raw), json.dumps(cfg), g=16)
        assert len(train_ids) == 60 and len(val_ids) == 3 and len(test_ids) == 3

        config = (raw / "ingest_config.json").read_text()
        samples = sg.build_samples(str(raw / "trajectories.csv"), str(raw / "pois.csv"), config)
        by_id = {s.user_id: s for s in samples}
        train = [by_id[u] for u in train_ids if u in by_id]
        val = [by_id[u] for u in val_ids if u in by_id]
        s = train[0]
        assert len(s.v_pre) == 256 and len(s.sc) == s.k * 256
        assert math.isclose(sum(s.sir), 1.0) or sum(s.sir) == 0.0

        sg.write_split(str(Path(tmp) / "train"), train)
        again = sg.load_split(str(Path(tmp) / "train"))
        assert [x.v_post for x in again] == [x.v_post for x in train]

        model = sg.Model(16, s.k, "full", base_channels=8, seed=1)
        ckpt = Path(tmp) / "ckpt"
        trained, log = sg.train(model, train, val, json.dumps({"max_epochs": 1, "batch_size": 20}), str(ckpt))
        assert len(log) == 1 and math.isfinite(log[0]["val_loss"])

        loaded = sg.Model.load(str(ckpt))
        maps = loaded.predict(val)
        assert maps == trained.predict(val)
        assert all(0.0 < p < 1.0 for p in maps[0])

        report = sg.evaluate(loaded, val)
        oracle = sg.accuracy_metrics(val[0].v_post, val[0].v_post, val[0].v_pre)
        assert oracle["overall"] in (1.0, None)
        assert abs(sg.cosine_similarity([1.0, 0.0], [1.0, 1.0]) - 1 / math.sqrt(2)) < 1e-12
        assert sg.sample_weight([0] * 4, 10.0) == 10.0
        pairs = sg.find_similar_pairs(train, 0.0, 1.0)
        if pairs:
            a, b = by_id[pairs[0][0]], by_id[pairs[0][1]]
            assert sg.pair_divergence(loaded, a, a) == 0.0
            sg.pair_divergence(loaded, a, b)
        try:
            sg.Model(16, 4, "nonsense")
        except ValueError:
            pass
        else:
            raise AssertionError("bad variant accepted")
        try:
            sg.load_split(str(Path(tmp) / "missing"))
        except OSError:
            pass
        else:
            raise AssertionError("missing split loaded")

        print(f"{loaded!r}: {loaded.parameter_count()} parameters, val overall {report['overall']}")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

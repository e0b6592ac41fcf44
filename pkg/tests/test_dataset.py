import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from apexflow.dataset import (
    TARGET_HEIGHT,
    TARGET_WIDTH,
    DatasetId,
    EmotionClass,
    FrameLoadError,
    ManifestError,
    SampleRecord,
    class_counts,
    load_manifest,
    load_sequence,
    remap_emotion,
    write_manifest,
)



def row(**overrides):
    base = {
        "dataset": "SMIC",
        "subject": "s1",
        "video": "v1",
        "raw_label": "positive",
        "onset": 1,
        "apex": None,
        "offset": 10,
        "frame_dir": "/tmp/frames/v1",
    }
    base.update(overrides)
    return base


def write_rows(tmp_path, rows):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(rows), encoding="utf-8")
    return path


class TestRemap:
    @pytest.mark.parametrize(
        "raw,dataset,expected",
        [
            ("repression", DatasetId.CASME2, EmotionClass.NEGATIVE),
            ("disgust", DatasetId.CASME2, EmotionClass.NEGATIVE),
            ("happiness", DatasetId.CASME2, EmotionClass.POSITIVE),
            ("surprise", DatasetId.CASME2, EmotionClass.SURPRISE),
            ("others", DatasetId.CASME2, None),
            ("sadness", DatasetId.CASME2, None),
            ("fear", DatasetId.CASME2, None),
            ("anger", DatasetId.SAMM, EmotionClass.NEGATIVE),
            ("contempt", DatasetId.SAMM, EmotionClass.NEGATIVE),
            ("disgust", DatasetId.SAMM, EmotionClass.NEGATIVE),
            ("fear", DatasetId.SAMM, EmotionClass.NEGATIVE),
            ("sadness", DatasetId.SAMM, EmotionClass.NEGATIVE),
            ("happiness", DatasetId.SAMM, EmotionClass.POSITIVE),
            ("other", DatasetId.SAMM, None),
            ("negative", DatasetId.SMIC, EmotionClass.NEGATIVE),
            ("positive", DatasetId.SMIC, EmotionClass.POSITIVE),
            ("surprise", DatasetId.SMIC, EmotionClass.SURPRISE),
        ],
    )
    def test_mapping(self, raw, dataset, expected):
        assert remap_emotion(raw, dataset) == expected

    def test_unknown_label_raises(self):
        with pytest.raises(ManifestError, match="unknown label"):
            remap_emotion("boredom", DatasetId.CASME2)

    @given(st.sampled_from(list(DatasetId)), st.data())
    def test_total_and_deterministic_on_documented_labels(self, dataset, data):
        from apexflow.dataset import _LABEL_MAPS

        raw = data.draw(st.sampled_from(sorted(_LABEL_MAPS[dataset])))
        first = remap_emotion(raw, dataset)
        assert remap_emotion(raw, dataset) == first
        assert first is None or isinstance(first, EmotionClass)


class TestManifest:
    def test_empty_manifest(self, tmp_path):
        assert load_manifest(write_rows(tmp_path, [])) == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_order_preserved_and_validated(self, tmp_path):
        rows = [row(video=f"v{i}") for i in range(5)]
        records = load_manifest(write_rows(tmp_path, rows))
        assert [r.video_id for r in records] == [f"v{i}" for i in range(5)]

    def test_smic_manifest_164_rows_apex_absent(self, tmp_path):
        labels = ["negative"] * 70 + ["positive"] * 51 + ["surprise"] * 43
        rows = [row(video=f"v{i}", raw_label=lab) for i, lab in enumerate(labels)]
        records = load_manifest(write_rows(tmp_path, rows))
        assert len(records) == 164
        assert all(r.apex_index is None for r in records)

    def test_bad_index_order_names_row(self, tmp_path):
        rows = [row(), row(video="bad", onset=5, offset=3, apex=None)]
        with pytest.raises(ManifestError, match="row 2"):
            load_manifest(write_rows(tmp_path, rows))

    def test_apex_outside_range_rejected(self, tmp_path):
        bad = row(dataset="CASME2", raw_label="disgust", apex=20, offset=10)
        with pytest.raises(ManifestError, match="apex"):
            load_manifest(write_rows(tmp_path, [bad]))

    def test_smic_with_apex_rejected(self, tmp_path):
        with pytest.raises(ManifestError, match="SMIC"):
            load_manifest(write_rows(tmp_path, [row(apex=5)]))

    def test_casme2_requires_apex(self, tmp_path):
        bad = row(dataset="CASME2", raw_label="disgust", apex=None)
        with pytest.raises(ManifestError, match="require an apex"):
            load_manifest(write_rows(tmp_path, [bad]))

    def test_excluded_rows_dropped(self, tmp_path):
        rows = [
            row(dataset="CASME2", raw_label="disgust", apex=4),
            row(dataset="CASME2", raw_label="others", apex=4, video="dropme"),
        ]
        records = load_manifest(write_rows(tmp_path, rows))
        assert [r.video_id for r in records] == ["v1"]

    def test_unknown_dataset_rejected(self, tmp_path):
        with pytest.raises(ManifestError, match="unknown dataset"):
            load_manifest(write_rows(tmp_path, [row(dataset="MMEW")]))

    def test_round_trip_identity(self, tmp_path):
        rows = [
            row(video="a"),
            row(dataset="CASME2", raw_label="repression", apex=3, video="b"),
            row(dataset="SAMM", raw_label="contempt", apex=7, video="c"),
        ]
        records = load_manifest(write_rows(tmp_path, rows))
        out = tmp_path / "copy.json"
        write_manifest(records, out)
        assert load_manifest(out) == records


def save_frames(tmp_path, arrays, mode="L"):
    d = tmp_path / "frames"
    d.mkdir(exist_ok=True)
    for i, arr in enumerate(arrays):
        Image.fromarray(arr, mode=mode).save(d / f"{i + 1:03d}.png")
    return d


def smic_record(frame_dir, offset):
    return SampleRecord(
        dataset_id=DatasetId.SMIC,
        subject_id="s1",
        video_id="v1",
        raw_label="positive",
        label=EmotionClass.POSITIVE,
        onset_index=1,
        apex_index=None,
        offset_index=offset,
        frame_dir=frame_dir,
    )


class TestLoadSequence:
    def test_resizes_to_target(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [rng.integers(0, 256, (400, 400), dtype=np.uint8) for _ in range(2)]
        d = save_frames(tmp_path, frames)
        seq = load_sequence(smic_record(d, 2))
        assert seq.shape == (2, TARGET_HEIGHT, TARGET_WIDTH)
        assert seq.min() >= 0.0 and seq.max() <= 1.0

    def test_minimal_two_frame_sequence(self, tmp_path):
        frames = [np.full((TARGET_HEIGHT, TARGET_WIDTH), 90, dtype=np.uint8)] * 2
        d = save_frames(tmp_path, frames)
        seq = load_sequence(smic_record(d, 2))
        assert seq.shape[0] == 2
        assert np.allclose(seq, 90 / 255.0)

    def test_missing_frame_raises(self, tmp_path):
        frames = [np.zeros((8, 8), dtype=np.uint8)] * 3
        d = save_frames(tmp_path, frames)
        with pytest.raises(FrameLoadError, match="3 frames"):
            load_sequence(smic_record(d, 4))

    def test_color_uses_luma_weights(self, tmp_path):
        red = np.zeros((TARGET_HEIGHT, TARGET_WIDTH, 3), dtype=np.uint8)
        red[..., 0] = 255
        d = save_frames(tmp_path, [red, red], mode="RGB")
        seq = load_sequence(smic_record(d, 2))
        assert np.allclose(seq, 0.299, atol=1e-6)


class TestClassCounts:
    def test_empty(self):
        assert class_counts([]) == {cls: 0 for cls in EmotionClass}

    def test_table_shaped_corpus(self, corpus_441):
        smic = [r for r in corpus_441 if r.dataset_id is DatasetId.SMIC]
        counts = class_counts(smic)
        assert counts == {
            EmotionClass.NEGATIVE: 70,
            EmotionClass.POSITIVE: 51,
            EmotionClass.SURPRISE: 43,
        }
        assert len(corpus_441) == 441
        total = class_counts(corpus_441)
        assert sum(total.values()) == 441
        assert total[EmotionClass.NEGATIVE] == 249

    def test_counts_sum_matches_records(self, corpus_441):
        casme = [r for r in corpus_441 if r.dataset_id is DatasetId.CASME2]
        assert sum(class_counts(casme).values()) == len(casme) == 145

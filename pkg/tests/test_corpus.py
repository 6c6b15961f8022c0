import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lance.corpus import (
    Dataset,
    PreferenceExample,
    SeedRecord,
    SftExample,
    ingest_seed,
    merge_datasets,
    read_jsonl,
    record_id,
    write_jsonl,
)
from lance.errors import EmptyInputError, KindMismatchError, MalformedRecordError, SchemaError


def raw(instruction, response, source="instruction-seed", **kw):
    return {"instruction": instruction, "response": response, "source": source, **kw}


class TestRecordId:
    def test_pure_function_of_texts(self):
        a = SeedRecord(instruction="what is 2+2?", response="4")
        b = SeedRecord(instruction="what is 2+2?", response="4", )
        assert a.id == b.id == record_id("what is 2+2?", "4")

    def test_distinguishes_field_boundaries(self):
        assert record_id("ab", "c") != record_id("a", "bc")


class TestSeedRecord:
    def test_rejects_blank_texts(self):
        with pytest.raises(ValueError):
            SeedRecord(instruction="   ", response="ok")
        with pytest.raises(ValueError):
            SeedRecord(instruction="ok", response="\n\t")

    def test_human_score_only_on_review_seeds(self):
        with pytest.raises(ValueError):
            SeedRecord(instruction="a", response="b", source="review-seed")
        with pytest.raises(ValueError):
            SeedRecord(instruction="a", response="b", human_score=5)
        rec = SeedRecord(instruction="a", response="b", source="review-seed", human_score=5)
        assert rec.human_score == 5

    def test_score_range(self):
        with pytest.raises(ValueError):
            SeedRecord(instruction="a", response="b", source="review-seed", human_score=11)


class TestIngest:
    def test_consistent_review_seed_retained(self):
        rec = raw("q", "a", source="review-seed", human_score=7)
        rid = record_id("q", "a")
        ds = ingest_seed([rec], {rid: 7}, tolerance=0)
        assert len(ds) == 1

    def test_inconsistent_review_seed_dropped(self):
        rec = raw("q", "a", source="review-seed", human_score=3)
        keeper = raw("q2", "a2")
        rid = record_id("q", "a")
        ds = ingest_seed([rec, keeper], {rid: 7}, tolerance=0)
        assert ds.ids() == {record_id("q2", "a2")}

    def test_tolerance_band(self):
        rec = raw("q", "a", source="review-seed", human_score=5)
        rid = record_id("q", "a")
        assert len(ingest_seed([rec], {rid: 6}, tolerance=1)) == 1
        with pytest.raises(EmptyInputError):
            ingest_seed([rec], {rid: 7}, tolerance=1)

    def test_missing_model_score_drops_when_map_given(self):
        rec = raw("q", "a", source="review-seed", human_score=5)
        keeper = raw("q2", "a2")
        ds = ingest_seed([rec, keeper], {}, tolerance=0)
        assert len(ds) == 1

    def test_no_map_passes_review_seeds_through(self):
        rec = raw("q", "a", source="review-seed", human_score=5)
        assert len(ingest_seed([rec], None, tolerance=0)) == 1

    def test_duplicates_collapse_to_unique_ids(self):
        # 8,800 unique records plus 200 exact duplicates; verify against an
        # independent hash-set count.
        records = [raw(f"instruction {n}", f"response {n}") for n in range(8800)]
        records += [raw(f"instruction {n}", f"response {n}") for n in range(200)]
        ds = ingest_seed(records, None, 0)
        oracle = {record_id(r["instruction"], r["response"]) for r in records}
        assert len(ds) == len(oracle) == 8800

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            ingest_seed([], None, 0)

    def test_malformed_record_reports_index(self):
        with pytest.raises(MalformedRecordError) as err:
            ingest_seed([raw("ok", "ok"), raw("", "resp")], None, 0)
        assert err.value.index == 1

    def test_unknown_field_rejected(self):
        with pytest.raises(MalformedRecordError):
            ingest_seed([{**raw("a", "b"), "bonus": 1}], None, 0)


class TestMerge:
    def test_idempotent_union(self):
        a = Dataset.build("seed", [SeedRecord(instruction="a", response="b")])
        ab = Dataset.build(
            "seed",
            [SeedRecord(instruction="a", response="b"), SeedRecord(instruction="c", response="d")],
        )
        merged = merge_datasets(a, ab)
        assert merged.ids() == ab.ids()

    def test_identity_element(self):
        empty = Dataset.build("seed", [])
        a = Dataset.build("seed", [SeedRecord(instruction="a", response="b")])
        assert merge_datasets(empty, a).ids() == a.ids()

    def test_disjoint_sets_in_canonical_order(self):
        left = Dataset.build("seed", [SeedRecord(instruction=f"L{i}", response="x") for i in range(50)])
        right = Dataset.build("seed", [SeedRecord(instruction=f"R{i}", response="x") for i in range(50)])
        merged = merge_datasets(left, right)
        oracle = sorted(left.ids() | right.ids())
        assert [r.id for r in merged] == oracle
        assert len(merged) == 100

    def test_kind_mismatch(self):
        seed = Dataset.build("seed", [])
        sft = Dataset.build("sft", [])
        with pytest.raises(KindMismatchError):
            merge_datasets(seed, sft)


small_seed_datasets = st.lists(
    st.tuples(st.integers(0, 8), st.integers(0, 3)), max_size=8
).map(
    lambda pairs: Dataset.build(
        "seed", [SeedRecord(instruction=f"instr {i}", response=f"resp {j}") for i, j in pairs]
    )
)


@settings(max_examples=60, deadline=None)
@given(small_seed_datasets, small_seed_datasets, small_seed_datasets)
def test_merge_matches_set_union_oracle(a, b, c):
    left = merge_datasets(merge_datasets(a, b), c)
    right = merge_datasets(a, merge_datasets(b, c))
    assert [r.id for r in left] == [r.id for r in right]
    assert merge_datasets(a, b).ids() == merge_datasets(b, a).ids() == a.ids() | b.ids()
    again = merge_datasets(a, a)
    assert again.ids() == a.ids() and len(again) == len(a)


class TestJsonl:
    def test_empty_dataset_roundtrip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_jsonl(Dataset.build("seed", []), path)
        assert path.read_text() == ""
        assert len(read_jsonl(path, "seed")) == 0

    def test_embedded_newline_roundtrip(self, tmp_path):
        rec = SeedRecord(instruction="multi", response="line one\nline two")
        path = tmp_path / "d.jsonl"
        write_jsonl(Dataset.build("seed", [rec]), path)
        assert len(path.read_text().strip().splitlines()) == 1
        back = read_jsonl(path, "seed")
        assert back.records[0].response == "line one\nline two"
        assert back.records[0].id == rec.id

    def test_sft_roundtrip_field_for_field(self, tmp_path):
        rec = SftExample(
            instruction="do the thing", response="done carefully", reward=8,
            iteration=2, parent_id="p" * 8, candidate_index=3,
        )
        path = tmp_path / "sft.jsonl"
        write_jsonl(Dataset.build("sft", [rec]), path)
        back = read_jsonl(path, "sft").records[0]
        assert back == rec

    def test_unknown_field_rejected_with_location(self, tmp_path):
        rec = SeedRecord(instruction="a", response="b")
        path = tmp_path / "d.jsonl"
        write_jsonl(Dataset.build("seed", [rec]), path)
        doc = json.loads(path.read_text())
        doc["surprise"] = True
        path.write_text(json.dumps(doc) + "\n")
        with pytest.raises(SchemaError) as err:
            read_jsonl(path, "seed")
        assert err.value.line == 1 and err.value.field == "surprise"

    def test_id_mismatch_rejected(self, tmp_path):
        rec = SeedRecord(instruction="a", response="b")
        path = tmp_path / "d.jsonl"
        write_jsonl(Dataset.build("seed", [rec]), path)
        doc = json.loads(path.read_text())
        doc["id"] = "0" * 64
        path.write_text(json.dumps(doc) + "\n")
        with pytest.raises(SchemaError) as err:
            read_jsonl(path, "seed")
        assert err.value.field == "id"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_jsonl(tmp_path / "nope.jsonl", "seed")


text_strategy = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=40
).filter(lambda s: s.strip())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(text_strategy, text_strategy), min_size=1, max_size=12))
def test_jsonl_roundtrip_random_texts(tmp_path_factory, pairs):
    ds = Dataset.build("seed", [SeedRecord(instruction=i, response=r) for i, r in pairs])
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_jsonl(ds, path)
    back = read_jsonl(path, "seed")
    assert [r.id for r in back] == [r.id for r in ds]
    assert [(r.instruction, r.response) for r in back] == [(r.instruction, r.response) for r in ds]


class TestPreferenceInvariants:
    def test_strict_reward_order(self):
        with pytest.raises(ValueError):
            PreferenceExample(
                instruction="i", preferred="p", dispreferred="d",
                reward_w=5, reward_l=5, iteration=0, parent_id="x",
            )

    def test_texts_must_differ(self):
        with pytest.raises(ValueError):
            PreferenceExample(
                instruction="i", preferred="same", dispreferred="same",
                reward_w=7, reward_l=2, iteration=0, parent_id="x",
            )

    def test_persisted_pairs_validated_on_read(self, tmp_path):
        good = PreferenceExample(
            instruction="i", preferred="better text", dispreferred="worse text",
            reward_w=7, reward_l=2, iteration=0, parent_id="x",
        )
        path = tmp_path / "p.jsonl"
        write_jsonl(Dataset.build("preference", [good]), path)
        doc = json.loads(path.read_text())
        doc["reward_w"], doc["reward_l"] = 2, 7
        path.write_text(json.dumps(doc) + "\n")
        with pytest.raises(SchemaError):
            read_jsonl(path, "preference")

import json

import numpy as np
import pytest

from alloyforge.composition import parse_formula
from alloyforge.records import (
    DocumentId,
    GroundTruthError,
    LengthAngstrom,
    MalformedOutput,
    MissingColumn,
    PhaseLabel,
    ProcessingCondition,
    RecordError,
    UnknownDocument,
    group_by_doc,
    is_missing,
    load_ground_truth,
    make_record,
    normalize_phase,
    normalize_processing,
    parse_length,
    parse_record_set,
    serialize_record_set,
)

from tests.conftest import FIXTURES
from tests.oracles import random_composition

DOC = DocumentId("doc1")


class TestFieldNormalization:
    def test_missing_sentinel_variants(self):
        for text in ("Not found", "NOT FOUND", "  not   found ", "", None):
            assert is_missing(text)
        assert not is_missing("3.19")

    def test_phase_tokens(self):
        assert normalize_phase("bcc").kind == "BCC"
        assert normalize_phase("body-centred cubic").kind == "BCC"
        assert normalize_phase("body-centered cubic (BCC)").kind == "BCC"
        assert normalize_phase("FCC solid solution").kind == "FCC"
        assert normalize_phase("hexagonal close-packed").kind == "HCP"
        assert normalize_phase("amorphous").kind == "amorphous"
        multi = normalize_phase("BCC + FCC")
        assert multi.kind == "multiphase" and multi.detail == "BCC + FCC"
        assert normalize_phase("dual-phase BCC").kind == "multiphase"
        assert normalize_phase("BCC with B2 ordering").kind == "multiphase"
        other = normalize_phase("C14 structure")
        assert other.kind == "other" and other.detail

    def test_processing_tokens(self):
        assert normalize_processing("as-cast").kind == "as_cast"
        assert normalize_processing("arc-melted and cast").kind == "as_cast"
        assert normalize_processing("annealed at 1200 C").kind == "annealed"
        assert normalize_processing("as-cast then annealed").kind == "annealed"
        assert normalize_processing("powder metallurgy").kind == "powder_processed"
        assert normalize_processing("spark plasma sintering").kind == "powder_processed"
        assert normalize_processing("selective laser melting (SLM)").kind == "additive"
        assert normalize_processing("Not found").kind == "unreported"
        other = normalize_processing("magnetron sputtered film")
        assert other.kind == "other" and other.detail

    def test_length_units(self):
        assert parse_length("3.19") == LengthAngstrom(3.19, 3.19, "unknown")
        assert parse_length("0.319 nm") == LengthAngstrom(3.19, 0.319, "nm")
        assert parse_length("319 pm") == LengthAngstrom(3.19, 319.0, "pm")
        assert parse_length("3.19 Å") == LengthAngstrom(3.19, 3.19, "angstrom")
        assert parse_length("3.19 angstrom").raw_unit == "angstrom"
        assert parse_length("3.19 +/- 0.02").raw_value == 3.19
        with pytest.raises(RecordError):
            parse_length("unreadable")

    def test_type_invariants(self):
        with pytest.raises(RecordError):
            PhaseLabel("multiphase")          # detail required
        with pytest.raises(RecordError):
            ProcessingCondition("other")      # detail required
        with pytest.raises(RecordError):
            LengthAngstrom(-1.0, -1.0, "unknown")
        with pytest.raises(RecordError):
            make_record(DOC)                  # name or composition required


class TestParseRecordSet:
    def test_plain_entry(self):
        text = json.dumps(
            [
                {
                    "alloy_name": "MoNbTaW",
                    "nominal_composition": "MoNbTaW",
                    "measured_composition": "Not found",
                    "phase": "BCC",
                    "processing_condition": "as-cast",
                    "lattice_constant_angstrom": "3.19",
                }
            ]
        )
        result = parse_record_set(text, DOC)
        assert result.entry_count == 1 and not result.issues
        record = result.records[0]
        assert record.lattice_constant.value == pytest.approx(3.19)
        assert record.phase.kind == "BCC"
        assert record.processing.kind == "as_cast"

    def test_not_found_lattice_absent(self):
        text = json.dumps([{"alloy_name": "MoNbTaW", "lattice_constant_angstrom": "Not found"}])
        result = parse_record_set(text, DOC)
        assert result.records[0].lattice_constant is None

    def test_empty_text_malformed(self):
        with pytest.raises(MalformedOutput):
            parse_record_set("", DOC)
        with pytest.raises(MalformedOutput):
            parse_record_set("no json anywhere", DOC)

    def test_prose_and_fences(self):
        inner = json.dumps([{"alloy_name": "MoNbTaW"}])
        text = f"Sure! Here is the data:\n```json\n{inner}\n```\nLet me know."
        assert len(parse_record_set(text, DOC).records) == 1

    def test_single_object_accepted(self):
        text = json.dumps({"alloy_name": "MoNbTaW"})
        assert len(parse_record_set(text, DOC).records) == 1

    def test_no_silent_loss(self):
        entries = [
            {"alloy_name": "MoNbTaW"},
            {"phase": "BCC"},                      # no name, no composition: dropped
            {"alloy_name": "CoCrNi", "nominal_composition": "Co1.1Cr0.9Nix"},
            "not an object",
        ]
        result = parse_record_set(json.dumps(entries), DOC)
        assert result.entry_count == 4
        assert len(result.records) + len(result.dropped_entries()) == 4
        assert len(result.records) == 2
        # the unresolved subscript surfaced as a field issue, record kept via name
        fields = {(i.entry_index, i.field) for i in result.issues}
        assert (2, "nominal_composition") in fields

    def test_bad_composition_dropped_without_name(self):
        result = parse_record_set(
            json.dumps([{"nominal_composition": "wt% stuff"}]), DOC
        )
        assert not result.records
        assert result.dropped_entries() == {0}


class TestSerialization:
    def test_round_trip_random_records(self):
        rng = np.random.default_rng(5)
        records = []
        phases = ("BCC", "fcc", "BCC + FCC", "amorphous", "Not found", "C14 laves")
        procs = ("as-cast", "annealed", "powder processing", "Not found", "sputtered")
        for i in range(40):
            comp = random_composition(rng)
            lattice = (
                None,
                float(np.round(rng.uniform(2.8, 3.6), 3)),
                "0.319 nm",
                "319 pm",
            )[int(rng.integers(0, 4))]
            records.append(
                make_record(
                    DocumentId(f"doc{i % 3}"),
                    alloy_name=comp.canonical_formula() if rng.random() < 0.8 else None,
                    nominal_composition=comp,
                    measured_composition=comp if rng.random() < 0.3 else None,
                    phase=str(phases[int(rng.integers(0, len(phases)))]),
                    processing=str(procs[int(rng.integers(0, len(procs)))]),
                    lattice_constant=lattice,
                )
            )
        by_doc = group_by_doc(records)
        for doc_id, doc_records in by_doc.items():
            text = serialize_record_set(doc_records)
            back = parse_record_set(text, DocumentId(doc_id))
            assert not back.issues
            assert back.records == doc_records
            assert serialize_record_set(back.records) == text

    def test_sentinel_totality(self):
        record = make_record(DOC, alloy_name="MoNbTaW")
        obj = json.loads(serialize_record_set([record]))[0]
        for key in ("nominal_composition", "measured_composition", "phase",
                    "processing_condition", "lattice_constant_angstrom"):
            assert obj[key] == "Not found"

    def test_empty_set(self):
        assert parse_record_set(serialize_record_set([]), DOC).records == []


class TestGroundTruth:
    def test_fixture_loads(self, truth_records, truth_by_doc):
        assert len(truth_records) == 22
        assert len(truth_by_doc) == 7
        assert [len(v) for v in truth_by_doc.values()] == [4, 3, 3, 3, 3, 3, 3]
        first = truth_records[0]
        assert first.nominal_composition == parse_formula("HfNbTaTiZr")
        assert first.measured_composition is not None
        assert first.lattice_constant.value == pytest.approx(3.404)

    def test_missing_column(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("doc_id,alloy_name\nd1,foo\n", encoding="utf-8")
        with pytest.raises(MissingColumn):
            load_ground_truth(bad)

    def test_header_only(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text(
            "doc_id,alloy_name,nominal_composition,measured_composition,"
            "phase,processing_condition,lattice_constant_angstrom\n",
            encoding="utf-8",
        )
        assert load_ground_truth(empty) == []

    def test_row_without_identity_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(
            "doc_id,alloy_name,nominal_composition,measured_composition,"
            "phase,processing_condition,lattice_constant_angstrom\n"
            "d1,Not found,Not found,Not found,BCC,as-cast,3.2\n",
            encoding="utf-8",
        )
        with pytest.raises(GroundTruthError) as err:
            load_ground_truth(bad)
        assert ":2:" in str(err.value)

    def test_unknown_document(self):
        with pytest.raises(UnknownDocument):
            load_ground_truth(FIXTURES / "ground_truth.csv", known_ids={"d01"})

    def test_known_ids_accepts_full_set(self, truth_by_doc):
        records = load_ground_truth(
            FIXTURES / "ground_truth.csv", known_ids=set(truth_by_doc)
        )
        assert len(records) == 22

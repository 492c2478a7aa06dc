import numpy as np
import pytest

from alloyforge.composition import (
    ConsistencyReport,
    EmptyFormula,
    NothingToCompare,
    UnknownElement,
    UnresolvedVariable,
    UnsupportedUnits,
    consistency_check,
    cosine_similarity,
    l1_distance,
    parse_formula,
)
from alloyforge.records import DocumentId, make_record

from tests.oracles import random_composition


class TestParseFormula:
    def test_equiatomic(self):
        comp = parse_formula("AlHfNbTaTiZr")
        assert set(comp.fractions) == {"Al", "Hf", "Nb", "Ta", "Ti", "Zr"}
        for fraction in comp.fractions.values():
            assert fraction == pytest.approx(1 / 6, abs=1e-12)

    def test_fractional_subscript(self):
        comp = parse_formula("Al0.5CoFeNi")
        assert comp.fractions["Al"] == pytest.approx(0.142857, abs=1e-6)
        assert comp.fractions["Co"] == pytest.approx(0.285714, abs=1e-6)

    def test_symbolic_subscript_rejected(self):
        with pytest.raises(UnresolvedVariable):
            parse_formula("AlxCoCrFeNi")

    def test_unknown_element(self):
        with pytest.raises(UnknownElement):
            parse_formula("Qx2Fe")

    def test_empty(self):
        with pytest.raises(EmptyFormula):
            parse_formula("")

    def test_weight_percent_rejected(self):
        with pytest.raises(UnsupportedUnits):
            parse_formula("Fe 70 wt% Cr 30 wt%")

    def test_atomic_percent_marker_stripped(self):
        assert parse_formula("Al0.5CoFeNi (at.%)") == parse_formula("Al0.5CoFeNi")

    def test_group_multiplier_distributes(self):
        comp = parse_formula("(CoCrNi)0.9Al0.1")
        total = 3 * 0.9 + 0.1
        assert comp.fractions["Co"] == pytest.approx(0.9 / total)
        assert comp.fractions["Al"] == pytest.approx(0.1 / total)

    def test_repeated_symbols_summed(self):
        assert parse_formula("FeNiFe") == parse_formula("Fe2Ni")

    def test_separators_ignored(self):
        assert parse_formula("Al-Co-Cr-Fe-Ni") == parse_formula("AlCoCrFeNi")

    def test_zero_coefficient_dropped(self):
        assert parse_formula("Al0CoNi") == parse_formula("CoNi")

    def test_canonical_idempotent(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            comp = random_composition(rng)
            once = parse_formula(comp.canonical_formula())
            twice = parse_formula(once.canonical_formula())
            for sym in once.fractions:
                assert abs(once.fractions[sym] - twice.fractions[sym]) <= 1e-12

    def test_full_precision_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            comp = random_composition(rng)
            assert parse_formula(comp.full_precision_formula()) == comp


class TestDistances:
    def test_identity(self):
        a = parse_formula("Al0.5Ni0.5")
        assert l1_distance(a, a) == 0.0
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_unit_vectors(self):
        a, b = parse_formula("Al"), parse_formula("Ni")
        assert l1_distance(a, b) == pytest.approx(2.0)
        assert cosine_similarity(a, b) == pytest.approx(0.0)

    def test_hand_derived_pair(self):
        a = parse_formula("Al0.5Ni0.5")
        b = parse_formula("Al0.25Ni0.75")
        assert l1_distance(a, b) == pytest.approx(0.5, abs=1e-4)
        assert cosine_similarity(a, b) == pytest.approx(0.8944, abs=1e-4)

    def test_scaling_invariance(self):
        base = parse_formula("Al2Ni6")
        scaled = parse_formula("Al1Ni3")
        probe = parse_formula("CoCrNi")
        assert cosine_similarity(base, probe) == pytest.approx(
            cosine_similarity(scaled, probe), abs=1e-12
        )

    def test_metric_axioms(self):
        rng = np.random.default_rng(1234)
        comps = [random_composition(rng) for _ in range(60)]
        for _ in range(1000):
            a, b, c = (comps[int(i)] for i in rng.integers(0, len(comps), 3))
            dab, dba = l1_distance(a, b), l1_distance(b, a)
            assert dab >= 0.0
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab <= 2.0 + 1e-12
            assert l1_distance(a, c) <= dab + l1_distance(b, c) + 1e-12
            cos = cosine_similarity(a, b)
            assert 0.0 <= cos <= 1.0
        for comp in comps[:20]:
            assert l1_distance(comp, comp) == 0.0


class TestConsistencyCheck:
    doc = DocumentId("docX")

    def test_identical_not_flagged(self):
        record = make_record(
            self.doc, alloy_name="MoNbTaW",
            nominal_composition="MoNbTaW", measured_composition="MoNbTaW",
        )
        reports = consistency_check(record)
        assert len(reports) == 3  # name/nominal, name/measured, nominal/measured
        for report in reports:
            assert isinstance(report, ConsistencyReport)
            assert report.l1 == pytest.approx(0.0, abs=1e-12)
            assert report.cosine == pytest.approx(1.0, abs=1e-12)
            assert not report.flagged

    def test_disagreement_flagged(self):
        record = make_record(
            self.doc, nominal_composition="Al0.5Ni0.5", measured_composition="Al0.25Ni0.75"
        )
        (report,) = consistency_check(record, l1_threshold=0.1, cosine_threshold=0.99)
        assert report.compared_pair == ("nominal_composition", "measured_composition")
        assert report.flagged

    def test_single_source_rejected(self):
        record = make_record(self.doc, nominal_composition="MoNbTaW")
        with pytest.raises(NothingToCompare):
            consistency_check(record)

    def test_unparseable_name_skipped(self):
        record = make_record(
            self.doc, alloy_name="alloy B2-type", nominal_composition="MoNbTaW",
            measured_composition="MoNbTaW",
        )
        reports = consistency_check(record)
        assert {r.compared_pair for r in reports} == {
            ("nominal_composition", "measured_composition")
        }

import pytest

from sbpfscan import fixtures, oracles
from sbpfscan.runtime.layout import deserialize
from sbpfscan.runtime.ledger import Ledger
from sbpfscan.symcore.concrete import replay

from conftest import analyze, image


def _ledger(**kw):
    led = Ledger()
    led.active = True
    for k, v in kw.items():
        setattr(led, k, v)
    return led


def test_trust_marks():
    led = _ledger(owner_compared=frozenset({0}), written=frozenset({5}),
                  key_sources={1: frozenset({("data", 0)}), 2: frozenset({"const"}),
                               3: frozenset({"pda"}), 4: frozenset({("data", 6)}),
                               7: frozenset({"ix"})})
    assert oracles.checked_accounts(led) == {0, 1, 2, 3, 5}
    assert oracles.trusted_accounts(led) == {1, 2}
    assert oracles.weak_key_checks(led) == [{"account": 4, "compared_to_data_of": 6}]


@pytest.mark.parametrize("name", sorted(fixtures.EXPECTED))
def test_fixture_verdicts(name):
    assert analyze(name).kinds == fixtures.EXPECTED[name]


def test_level1_finding_details():
    findings = analyze("level1").findings
    assert len(findings) == 2     # the debit and the credit write
    for f in findings:
        assert f.kind == oracles.MSC and f.confidence == "high"
        assert f.evidence["signer_check"] is False
        accs, _, _ = deserialize(f.exploit.input_bytes)
        assert not any(a.is_signer for a in accs)


def test_level0_names_the_unchecked_account():
    for f in analyze("level0").findings:
        assert f.kind == oracles.MOC and f.unchecked_accounts == (0,)
        assert 0 in f.evidence["read_accounts"]
        assert 0 not in f.evidence["checked_accounts"]


def test_signer_rejoin_is_not_a_check():
    assert analyze("signer_rejoin").kinds == {oracles.MSC}
    assert analyze("signer_rejoin_gated").kinds == set()


@pytest.mark.parametrize("name", ["owner_write_before", "owner_write_after"])
def test_written_account_is_implicitly_owner_checked(name):
    assert oracles.MOC not in analyze(name).kinds
    assert analyze("owner_unwritten").kinds == {oracles.MOC}


def test_acpi_guard_matrix():
    assert analyze("acpi_const").kinds == set() and analyze("acpi_const").notes == []
    guarded = analyze("acpi_owner_data")
    assert guarded.kinds == set()
    assert [n["kind"] for n in guarded.notes] == ["cpi-partially-guarded"]
    assert analyze("level4").kinds == {oracles.ACPI}


@pytest.mark.parametrize("name", sorted(n for n, k in fixtures.EXPECTED.items() if k))
def test_every_exploit_replays_to_its_site(name):
    findings = analyze(name).findings
    assert findings
    img = image(name)
    for f in findings:
        assert f.exploit is not None
        ex = f.exploit
        vm = replay(img, ex.input_bytes, pda_table=ex.sidecar["pda_table"],
                    cpi_effects=ex.sidecar["cpi_effects"])
        assert f.site in vm.visited
        assert ex.replay_reached

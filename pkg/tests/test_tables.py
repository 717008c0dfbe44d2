import pytest

import tables
from training import build_report


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    monkeypatch.delenv("TABFORECAST_DB_URL", raising=False)
    assert tables.configure_ledger(f"sqlite:///{tmp_path / 'runs.db'}")
    yield
    tables.configure_ledger(None)


class TestLedger:
    def test_unconfigured(self, monkeypatch):
        monkeypatch.delenv("TABFORECAST_DB_URL", raising=False)
        assert tables.configure_ledger(None) is False
        assert tables.record_reports("evaluate", []) == 0
        assert tables.recent_runs() == []

    def test_url_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TABFORECAST_DB_URL", f"sqlite:///{tmp_path / 'env.db'}")
        assert tables.configure_ledger()
        assert (tmp_path / "env.db").exists()
        tables.configure_ledger(None)

    def test_records_reports_and_failures(self, ledger):
        report = build_report("subject-a", [[120.0, 121.0]], [[122.0, 121.5]], model="linear", train_cycles=60)
        written = tables.record_reports("ablate", [report], {"model": {"d_model": 32}},
                                        failures=[("subject-b", "tabnet", 60, 2, "TooFewCycles: short")])
        assert written == 2
        runs = tables.recent_runs()
        assert [r["status"] for r in runs] == ["failed", "ok"]
        ok = runs[1]
        assert (ok["subject_id"], ok["model"], ok["train_cycles"], ok["horizon"]) == ("subject-a", "linear", 60, 2)
        assert ok["mae"] == pytest.approx(1.25)
        assert runs[0]["mae"] is None

    def test_limit(self, ledger):
        reports = [build_report(f"s{i}", [[100.0]], [[101.0]]) for i in range(5)]
        tables.record_reports("evaluate", reports)
        assert [r["subject_id"] for r in tables.recent_runs(limit=2)] == ["s4", "s3"]

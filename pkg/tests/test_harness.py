import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from cldlab import cld_core, harness
from cldlab.cli import main as cli_main
from cldlab.errors import ConfigError

CSV_HEADER = ("run_id,config_hash,step,domain_id,split,loss_nats,accuracy,"
              "ci_index,penalty_value,penalty_kind,seed")


def base_doc(out, **overrides):
    doc = {
        "family": "CANON-D",
        "source": "source",
        "target": "target",
        "objective": {"kind": "ERM"},
        "model": {"widths": [4]},
        "trainer": {"optimizer": "gd", "lr": 0.5, "steps": 5,
                    "train_n": 40, "seed": 0},
        "eval": {"ci_pairs": 50},
        "pairs": {"n": 10},
        "out": str(out),
    }
    doc.update(overrides)
    return doc


def broken_family_path(tmp_path):
    """CLD2 pair whose domains disagree on the core marginal."""
    family, source, _ = cld_core.canonical_fixture("CANON-D")
    bad = cld_core.make_domain(family, "CLD2", domain_id="target",
                               p_cn=np.array([[0.35, 0.35], [0.15, 0.15]]))
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(cld_core.family_to_dict(family, [source, bad])))
    return str(path)


class TestConfigParsing:
    def test_defaults_fill_in(self, tmp_path):
        cfg = harness.config_from_dict(
            {"family": "CANON-D", "source": "source", "target": "target"})
        assert cfg.objective.kind == "ERM"
        assert cfg.model.widths == (16,)
        assert cfg.trainer.optimizer == "gd"
        assert cfg.eval.exact is True

    def test_source_list_becomes_tuple(self, tmp_path):
        cfg = harness.config_from_dict(base_doc(
            tmp_path, source=["source", "target"],
            objective={"kind": "VREX", "lambda": 1.0}))
        assert cfg.sources == ("source", "target")

    @pytest.mark.parametrize("mutate,field", [
        (lambda d: d.update(bogus=1), "bogus"),
        (lambda d: d.pop("family"), "family"),
        (lambda d: d["trainer"].update(cadence=3), "trainer.cadence"),
        (lambda d: d["trainer"].update(lr=0.0), "trainer.lr"),
        (lambda d: d["trainer"].update(optimizer="lbfgs"), "trainer.optimizer"),
        (lambda d: d["trainer"].update(head_only_steps=99),
         "trainer.head_only_steps"),
        (lambda d: d["model"].update(embedding="learned"), "model.embedding"),
        (lambda d: d["eval"].update(ci_style="shuffled"), "eval.ci_style"),
        (lambda d: d.update(objective={"kind": "GROUP_DRO"}), "source"),
        (lambda d: d.update(source=["source", "target"],
                            objective={"kind": "CORAL", "lambda": 1.0},
                            trainer={"data_mode": "population"}),
         "trainer.data_mode"),
        (lambda d: d["trainer"].update(batch_size=8,
                                       data_mode="population"),
         "trainer.batch_size"),
        (lambda d: d["trainer"].update(batch_size=8, optimizer="gd"),
         "trainer.batch_size"),
    ])
    def test_invalid_configs_name_the_field(self, tmp_path, mutate, field):
        doc = base_doc(tmp_path)
        mutate(doc)
        with pytest.raises(ConfigError) as err:
            harness.config_from_dict(doc)
        assert err.value.field == field

    def test_round_trip_is_stable(self, tmp_path):
        cfg = harness.config_from_dict(base_doc(tmp_path))
        again = harness.config_from_dict(harness.config_to_dict(cfg))
        assert harness.config_to_dict(again) == harness.config_to_dict(cfg)


class TestConfigHash:
    def test_key_order_does_not_matter(self, tmp_path):
        doc = base_doc(tmp_path)
        shuffled = {k: doc[k] for k in reversed(list(doc))}
        a = harness.config_from_dict(doc)
        b = harness.config_from_dict(shuffled)
        assert harness.config_hash(a, 0) == harness.config_hash(b, 0)

    def test_stamped_seed_replaces_config_seed(self, tmp_path):
        a = harness.config_from_dict(base_doc(tmp_path))
        b = harness.config_from_dict(
            base_doc(tmp_path, trainer={"optimizer": "gd", "lr": 0.5,
                                        "steps": 5, "train_n": 40,
                                        "seed": 17}))
        assert harness.config_hash(a, 3) == harness.config_hash(b, 3)
        assert harness.config_hash(a, 3) != harness.config_hash(a, 4)

    def test_canonical_json_is_sorted_and_compact(self):
        assert harness.canonical_json({"b": 1, "a": [1, 2]}) \
            == '{"a":[1,2],"b":1}'


class TestResolve:
    def test_fixture_name(self):
        family, domains = harness.resolve_family("CANON-D")
        assert [d.domain_id for d in domains] == ["source", "target"]

    def test_json_path(self, tmp_path, canon_d):
        family, source, target = canon_d
        path = tmp_path / "fam.json"
        path.write_text(json.dumps(
            cld_core.family_to_dict(family, [source, target])))
        loaded, domains = harness.resolve_family(str(path))
        assert np.array_equal(loaded.p_x_given_cn, family.p_x_given_cn)
        assert len(domains) == 2

    def test_missing_path(self):
        with pytest.raises(ConfigError) as err:
            harness.resolve_family("/nonexistent/family.json")
        assert err.value.field == "family"

    def test_out_dir_precedence(self, tmp_path, monkeypatch):
        env_dir, flag_dir, cfg_dir = (str(tmp_path / n) for n in "efc")
        monkeypatch.delenv("CLDLAB_OUT", raising=False)
        assert harness.resolve_out_dir(None, cfg_dir) == cfg_dir
        assert harness.resolve_out_dir(flag_dir, cfg_dir) == flag_dir
        monkeypatch.setenv("CLDLAB_OUT", env_dir)
        assert harness.resolve_out_dir(flag_dir, cfg_dir) == env_dir
        assert os.path.isdir(env_dir)


class TestRunExperiment:
    def test_artifacts_and_schema(self, tmp_path):
        cfg = harness.config_from_dict(base_doc(tmp_path / "r"))
        rec = harness.run_experiment(cfg)
        assert os.path.exists(rec.csv_path)
        assert os.path.exists(rec.summary_path)
        assert os.path.exists(rec.checkpoint_path)
        lines = open(rec.csv_path).read().splitlines()
        assert lines[0] == CSV_HEADER
        # final step writes one source row and one target row
        assert len(lines) == 3
        summary = json.load(open(rec.summary_path))
        assert summary["status"] == "ok"
        assert summary["run_id"] == rec.run_id
        splits = [r["split"] for r in rec.rows]
        assert splits == ["source", "target"]

    def test_rerun_is_byte_identical(self, tmp_path):
        # identical config document, two separate output directories
        cfg = harness.config_from_dict(base_doc(tmp_path / "c"))
        recs = [harness.run_experiment(cfg, out_dir=str(tmp_path / n))
                for n in ("a", "b")]
        assert recs[0].run_id == recs[1].run_id
        by = [{os.path.basename(p): open(p, "rb").read()
               for p in (r.csv_path, r.summary_path, r.checkpoint_path)}
              for r in recs]
        assert by[0] == by[1]

    def test_eval_every_inserts_midstream_rows(self, tmp_path):
        doc = base_doc(tmp_path, trainer={"optimizer": "gd", "lr": 0.5,
                                          "steps": 4, "train_n": 40,
                                          "seed": 0, "eval_every": 2})
        rec = harness.run_experiment(harness.config_from_dict(doc))
        steps = sorted({r["step"] for r in rec.rows})
        assert steps == [2, 4]
        assert len(rec.rows) == 4

    def test_unknown_domain(self, tmp_path):
        cfg = harness.config_from_dict(base_doc(tmp_path, target="nope"))
        with pytest.raises(ConfigError) as err:
            harness.run_experiment(cfg)
        assert err.value.field == "target"

    def test_numeric_failure_leaves_diagnostic(self, tmp_path):
        doc = base_doc(tmp_path, trainer={"optimizer": "gd", "lr": 1e200,
                                          "steps": 5, "train_n": 40,
                                          "seed": 0})
        cfg = harness.config_from_dict(doc)
        from cldlab.errors import NonFiniteActivation
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteActivation):
                harness.run_experiment(cfg)
        diags = [p for p in os.listdir(tmp_path)
                 if p.startswith("run-") and p.endswith(".json")]
        assert len(diags) == 1
        doc = json.load(open(tmp_path / diags[0]))
        assert doc["status"] == "numeric-failure"
        assert "error" in doc


class TestVerifySuite:
    def test_canonical_family_passes(self, tmp_path):
        report, path = harness.verify_suite("CANON-D",
                                            out_dir=str(tmp_path))
        assert report.all_pass
        stored = json.load(open(path))
        assert stored["all_pass"] is True
        assert len(stored["claims"]) == len(report.claims)

    def test_incoherent_family_fails(self, tmp_path):
        report, _ = harness.verify_suite(broken_family_path(tmp_path),
                                         out_dir=str(tmp_path))
        assert not report.all_pass
        failed = {c.id for c in report.claims if c.status == "FAIL"}
        assert failed  # the shared-core guarantees are the ones that break


class TestSweep:
    def test_grid_product_rows(self, tmp_path):
        doc = base_doc(tmp_path, eval={"ci_pairs": 0})
        grid = {"trainer.lr": [0.1, 0.2], "model.widths": [[4], [6]]}
        records = harness.sweep(doc, grid, out_dir=str(tmp_path))
        assert len(records) == 4
        assert len({r.run_id for r in records}) == 4
        lines = open(tmp_path / "sweep.csv").read().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 5
        for line in lines[1:]:
            assert ",target," in line

    def test_empty_grid_is_single_run(self, tmp_path):
        records = harness.sweep(base_doc(tmp_path), {},
                                out_dir=str(tmp_path))
        assert len(records) == 1

    def test_explicit_seed_axis(self, tmp_path):
        doc = base_doc(tmp_path, eval={"ci_pairs": 0})
        records = harness.sweep(doc, {"trainer.seed": [3, 9]},
                                out_dir=str(tmp_path))
        assert [r.rows[0]["seed"] for r in records] == [3, 9]

    def test_malformed_grid(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.sweep(base_doc(tmp_path), {"trainer.lr": []})


class TestGenerateArtifacts:
    def test_jsonl_outputs(self, tmp_path):
        cfg = harness.config_from_dict(base_doc(tmp_path))
        paths = harness.generate_artifacts(cfg)
        names = [os.path.basename(p) for p in paths]
        assert names == ["dataset-source.jsonl", "dataset-target.jsonl",
                         "pairs-source.jsonl"]
        rows = [json.loads(l) for l in open(paths[0])]
        assert len(rows) == cfg.trainer.train_n
        for r in rows:
            assert r["x"] == 2 * r["xc"] + r["xn"]
        pair_rows = [json.loads(l) for l in open(paths[2])]
        assert len(pair_rows) == cfg.pairs.n
        for r in pair_rows:
            assert r["x_tilde"] == 2 * r["xc"] + r["xn_tilde"]


class TestCli:
    def invoke(self, *args):
        return CliRunner().invoke(cli_main, list(args))

    def write_config(self, tmp_path, doc):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_verify_passes_on_fixture(self, tmp_path):
        res = self.invoke("verify", "--family", "CANON-D",
                          "--out", str(tmp_path))
        assert res.exit_code == 0
        assert "P1: PASS" in res.output
        assert "report: " in res.output

    def test_verify_fails_on_incoherent_family(self, tmp_path):
        res = self.invoke("verify", "--family", broken_family_path(tmp_path),
                          "--out", str(tmp_path))
        assert res.exit_code == 1
        assert ": FAIL" in res.output

    def test_missing_config_is_a_usage_error(self):
        res = self.invoke("train", "--config", "/nope.json")
        assert res.exit_code == 2
        assert "config error" in res.output

    def test_train_echoes_csv(self, tmp_path):
        cfgp = self.write_config(tmp_path, base_doc(tmp_path))
        res = self.invoke("train", "--config", cfgp)
        assert res.exit_code == 0
        assert res.output.splitlines()[0] == CSV_HEADER

    def test_evaluate_and_ci_index_roundtrip(self, tmp_path):
        cfgp = self.write_config(tmp_path, base_doc(tmp_path))
        assert self.invoke("train", "--config", cfgp).exit_code == 0
        ckpt = [p for p in os.listdir(tmp_path)
                if p.startswith("model-")][0]
        res = self.invoke("evaluate", "--config", cfgp,
                          "--model", str(tmp_path / ckpt), "--format", "json")
        assert res.exit_code == 0
        rows = json.loads(res.output)
        assert {r["split"] for r in rows} == {"source", "target"}
        res = self.invoke("ci-index", "--config", cfgp,
                          "--model", str(tmp_path / ckpt))
        assert res.exit_code == 0
        assert res.output.splitlines()[0] \
            == "domain_id,ci_index,stderr,n_pairs,style"

    def test_evaluate_without_model_is_config_error(self, tmp_path):
        cfgp = self.write_config(tmp_path, base_doc(tmp_path))
        res = self.invoke("evaluate", "--config", cfgp)
        assert res.exit_code == 2

    def test_numeric_blowup_exits_three(self, tmp_path):
        doc = base_doc(tmp_path, trainer={"optimizer": "gd", "lr": 1e200,
                                          "steps": 5, "train_n": 40,
                                          "seed": 0})
        cfgp = self.write_config(tmp_path, doc)
        with np.errstate(over="ignore", invalid="ignore"):
            res = self.invoke("train", "--config", cfgp)
        assert res.exit_code == 3

    def test_generate_lists_artifacts(self, tmp_path):
        cfgp = self.write_config(tmp_path, base_doc(tmp_path))
        res = self.invoke("generate", "--config", cfgp)
        assert res.exit_code == 0
        assert res.output.strip().splitlines()[-1].endswith("pairs-source.jsonl")

    def test_sweep_echoes_run_ids(self, tmp_path):
        doc = base_doc(tmp_path, eval={"ci_pairs": 0})
        cfgp = self.write_config(tmp_path, doc)
        gridp = tmp_path / "grid.json"
        gridp.write_text(json.dumps({"trainer.lr": [0.1, 0.2]}))
        res = self.invoke("sweep", "--config", cfgp, "--grid", str(gridp))
        assert res.exit_code == 0
        assert len(res.output.strip().splitlines()) == 2
        assert os.path.exists(tmp_path / "sweep.csv")

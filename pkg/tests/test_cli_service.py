import json
import socket
import subprocess
import sys
import threading
from pathlib import Path

import pytest

from rank_moe import cli
from rank_moe.pipeline import RankingModel, train
from rank_moe.service import RankingService, start_background
from rank_moe.synthgen import GenConfig, generate, oracle_score

from conftest import tiny_config

TINY_CONF = """
# tiny run for tests
n_sessions = 40   # sessions
n_talents = 200
n_jobs = 10
n_recruiters = 9
test_fraction = 0.25
batch_size = 16
max_steps = 8
text_dim = 16
jd_dim = 24
id_dim = 8
recruiter_vocab = 32
query_vocab = 64
talent_vocab = 512
job_vocab = 32
log_every = 4
"""


@pytest.fixture
def workdir(tmp_path):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY_CONF + f"data_dir = {tmp_path / 'data'}\ncheckpoint = {tmp_path / 'model.bin'}\n")
    return tmp_path, conf


def run(*args):
    return cli.main([str(a) for a in args])


# ------------------------------------------------------------ config parsing


def test_config_parsing_and_flag_override():
    cfg = cli.parse_config_text("lr = 0.5  # note\nseed=4\nrelevance_stop_gradient = true\nrole_fractions = 0.5,0.2,0.3\nbehavior.SA.click_flip = 0.3\n")
    assert cfg.train.lr == 0.5 and cfg.train.seed == 4 and cfg.gen.seed == 4
    assert cfg.train.relevance_stop_gradient is True
    assert cfg.gen.role_fractions == (0.5, 0.2, 0.3)
    assert cfg.gen.behavior["SA"].click_flip == 0.3
    assert cli.DEFAULT_BEHAVIOR["SA"].click_flip == 0.20
    args = cli.build_parser().parse_args(["train", "--seed", "9", "--steps", "11"])
    cfg = cli.apply_flags(cfg, args)
    assert (cfg.train.seed, cfg.gen.seed, cfg.train.max_steps) == (9, 9, 11)


@pytest.mark.parametrize("text", ["bogus_key = 1", "lr = fast", "no equals sign", "ablation = nothing", "behavior.XX.click_flip = 1"])
def test_bad_config_is_usage_error(tmp_path, text):
    conf = tmp_path / "bad.conf"
    conf.write_text(text + "\n")
    assert run("describe", "--config", conf) == cli.EXIT_USAGE


def test_usage_errors_exit_one(capsys):
    assert run("fly") == cli.EXIT_USAGE
    assert run("describe", "--config", "/nonexistent.conf") == cli.EXIT_USAGE
    assert run("describe", "--steps", "many") == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("RANK_MOE_LOG", "chatty")
    assert run("describe") == cli.EXIT_USAGE


# ------------------------------------------------------------ commands


def test_describe_default_is_stable(capsys):
    assert run("describe") == 0
    first = capsys.readouterr().out
    assert run("describe") == 0
    assert capsys.readouterr().out == first
    count = int(next(l for l in first.splitlines() if l.startswith("parameters")).split("\t")[1])
    assert count == RankingModel(cli.TrainConfig()).param_count()


def test_generate_train_eval(workdir, capsys):
    tmp, conf = workdir
    assert run("generate", "--config", conf) == 0
    assert (tmp / "data" / "train.jsonl").is_file()
    assert run("train", "--config", conf, "--no-timestamp") == 0
    assert (tmp / "model.bin").is_file()
    loss_lines = (tmp / "model.bin.loss.csv").read_text().splitlines()
    assert loss_lines[0] == "step,loss_total,loss_ctr,loss_cvr,loss_relv"
    assert [l.split(",")[0] for l in loss_lines[1:]] == ["1", "4", "8"]
    out = tmp / "eval.csv"
    capsys.readouterr()
    assert run("eval", "--config", conf, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "MRR@10" in printed
    header, row = out.read_text().splitlines()
    assert len(header.split(",")) == len(row.split(","))


def test_commands_are_idempotent(workdir, tmp_path):
    tmp, conf = workdir
    assert run("generate", "--config", conf) == 0
    blobs = []
    for name in ("a.bin", "b.bin"):
        assert run("train", "--config", conf, "--checkpoint", tmp / name, "--no-timestamp") == 0
        blobs.append(((tmp / name).read_bytes(), Path(str(tmp / name) + ".loss.csv").read_bytes(),
                      Path(str(tmp / name) + ".meta.json").read_bytes()))
    assert blobs[0] == blobs[1]


def test_eval_with_other_config_exits_three(workdir, capsys):
    tmp, conf = workdir
    assert run("generate", "--config", conf) == 0
    assert run("train", "--config", conf) == 0
    other = tmp / "other.conf"
    other.write_text(conf.read_text() + "n_experts = 5\n")
    capsys.readouterr()
    assert run("eval", "--config", other) == cli.EXIT_CHECKPOINT
    assert "n_experts: 3 -> 5" in capsys.readouterr().err


def test_missing_and_corrupt_files(workdir):
    tmp, conf = workdir
    assert run("train", "--config", conf) == cli.EXIT_DATA  # no data generated yet
    assert run("generate", "--config", conf) == 0
    assert run("eval", "--config", conf) == cli.EXIT_CHECKPOINT  # no checkpoint yet
    assert run("train", "--config", conf) == 0
    blob = bytearray((tmp / "model.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp / "model.bin").write_bytes(bytes(blob))
    assert run("eval", "--config", conf) == cli.EXIT_CHECKPOINT
    (tmp / "data" / "test.jsonl").write_text('{"role": "SA"}\n')
    assert run("train", "--config", conf) == 0
    assert run("eval", "--config", conf) == cli.EXIT_DATA


def test_ablate_writes_variant_rows(workdir):
    tmp, conf = workdir
    conf.write_text(conf.read_text() + "max_steps = 2\nablation_seeds = 1,2\nablation_groups = variants,experts\n")
    assert run("generate", "--config", conf) == 0
    out = tmp / "abl.csv"
    assert run("ablate", "--config", conf, "--out", out) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "variant,seed,auc_ctr,auc_cvr,auc_avg"
    names = [r.split(",")[0] for r in rows[1:]]
    assert len(names) == (5 + 4) * 2
    assert sorted({n for n in names if n.startswith("experts=")}) == ["experts=1", "experts=10", "experts=3", "experts=5"]


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rank_moe.cli", "describe"], capture_output=True, text=True)
    assert proc.returncode == 0 and "digest" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "rank_moe.cli"], capture_output=True, text=True)
    assert proc.returncode == 1


# ------------------------------------------------------------ service


@pytest.fixture(scope="module")
def served_model():
    tr, te, world = generate(GenConfig(n_sessions=120, n_talents=300, n_jobs=12, n_recruiters=12, seed=5))
    model = train(tr, tiny_config(max_steps=30)).model
    return model, te, world


def _request(records, k=None):
    r0 = records[0]
    cands = records[:k] if k else records
    return {
        "recruiter_id": r0.recruiter_id, "role": r0.role, "query_id": r0.query_id, "job_id": r0.job_id,
        "jd_text": r0.jd_text, "history_talent_ids": r0.history_talent_ids,
        "candidates": [{"talent_id": c.talent_id, "resume_text": c.resume_text} for c in cands],
    }


def _session(records, idx=0):
    sid = sorted({r.session_id for r in records})[idx]
    return [r for r in records if r.session_id == sid]


def test_single_candidate(served_model):
    model, te, _ = served_model
    svc = RankingService(model)
    reply = json.loads(svc.handle_line(json.dumps(_request(_session(te), k=1))))
    (res,) = reply["results"]
    assert res["talent_id"] == _session(te)[0].talent_id
    assert all(0 <= res[k] <= 1 for k in ("p_ctr", "p_cvr", "p_relv", "final_score"))


def test_response_is_sorted_permutation_with_nine_digits(served_model):
    model, te, _ = served_model
    svc = RankingService(model)
    req = _request(_session(te, 3))
    line = svc.handle_line(json.dumps(req))
    results = json.loads(line)["results"]
    assert sorted(r["talent_id"] for r in results) == sorted(c["talent_id"] for c in req["candidates"])
    keys = [(-r["final_score"], r["talent_id"]) for r in results]
    assert keys == sorted(keys)
    for r in results:
        assert len(repr(r["final_score"]).lstrip("0.").replace(".", "").split("e")[0]) <= 9
    assert svc.handle_line(json.dumps(req)) == line


def test_unknown_ids_are_scored(served_model):
    model, _, _ = served_model
    req = {"recruiter_id": "stranger", "role": "TL", "query_id": "q?", "jd_text": "", "history_talent_ids": ["ghost"],
           "candidates": [{"talent_id": "new1", "resume_text": "skill:s01"}, {"talent_id": "new2", "resume_text": ""}]}
    results = json.loads(RankingService(model).handle_line(json.dumps(req)))["results"]
    assert len(results) == 2


@pytest.mark.parametrize(
    "line,code",
    [
        ("not json", "bad_json"),
        ("[1, 2]", "bad_request"),
        ('{"role": "SA"}', "missing_field"),
        ('{"recruiter_id": "r", "role": "HR", "query_id": "q", "candidates": [{"talent_id": "t"}]}', "bad_field"),
        ('{"recruiter_id": "r", "role": "SA", "query_id": "q", "candidates": []}', "empty_candidates"),
        ('{"recruiter_id": "r", "role": "SA", "query_id": "q", "candidates": [{"talent_id": "t"}, {"talent_id": "t"}]}',
         "duplicate_candidate"),
        (b"\xff\xfe", "bad_encoding"),
    ],
)
def test_malformed_requests_get_error_objects(served_model, line, code):
    model, _, _ = served_model
    reply = json.loads(RankingService(model).handle_line(line))
    assert reply["code"] == code and reply["error"]


def test_no_mtl_model_reports_null_relevance(tiny_data):
    tr, te, _ = tiny_data
    model = RankingModel(tiny_config(ablation="no_jd_no_mtl"))
    model.fit_vocab(tr)
    reply = json.loads(RankingService(model).handle_line(json.dumps(_request(_session(te)))))
    assert all(r["p_relv"] is None for r in reply["results"])


def _client(port, lines):
    with socket.create_connection(("127.0.0.1", port), timeout=30) as s:
        f = s.makefile("rwb")
        out = []
        for line in lines:
            f.write(line.encode("utf-8") + b"\n")
            f.flush()
            if not line.strip():
                continue  # blank lines are skipped without a reply
            out.append(f.readline().decode("utf-8").rstrip("\n"))
        return out


def test_server_keeps_connection_open_after_errors(served_model):
    model, te, _ = served_model
    server, _ = start_background(RankingService(model))
    try:
        good = json.dumps(_request(_session(te)))
        replies = _client(server.port, ["{oops", good, "", good])
        assert json.loads(replies[0])["code"] == "bad_json"
        assert len(replies) == 3
        assert replies[1] == replies[2] and "results" in json.loads(replies[1])
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_clients_match_single_client(served_model):
    model, te, _ = served_model
    svc = RankingService(model)
    sessions = sorted({r.session_id for r in te})
    requests = [json.dumps(_request([r for r in te if r.session_id == s])) for s in sessions[:12]]
    baseline = [svc.handle_line(r) for r in requests]
    server, _ = start_background(svc)
    try:
        results: dict[int, list[str]] = {}

        def worker(i):
            order = requests[i:] + requests[:i]
            results[i] = _client(server.port, order * 2)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i, got in results.items():
            expected = baseline[i:] + baseline[:i]
            assert got == expected * 2
        assert len(results) == 8
    finally:
        server.shutdown()
        server.server_close()


def _matching_request(records, world, job: int):
    """Three candidates for ``job``: one covering all its skills, two sharing none."""
    overlap = world.talent_skills @ world.job_skills[job]
    resumes = {r.talent_id: r.resume_text for r in records}
    seen = sorted(resumes)
    full = [t for t in seen if overlap[int(t[3:])] == world.job_skills[job].sum()]
    none = [t for t in seen if overlap[int(t[3:])] == 0]
    if not full or len(none) < 2:
        return None, None
    template = next(r for r in records if int(r.job_id[3:]) == job and r.jd_text)
    req = _request([template])
    req["candidates"] = [{"talent_id": t, "resume_text": resumes[t]} for t in (none[0], full[0], none[1])]
    return req, full[0]


@pytest.mark.slow
def test_matching_candidate_ranks_first_under_oracle_and_model():
    tr, te, world = generate(GenConfig(n_sessions=600, n_talents=500, n_jobs=12, n_recruiters=30, seed=9))
    jobs = sorted({int(r.job_id[3:]) for r in tr if r.jd_text})
    wins = 0
    for seed in range(1, 6):
        model = train(tr, tiny_config(max_steps=400, batch_size=64, lr=3e-3, seed=seed)).model
        svc = RankingService(model)
        hits = total = 0
        for job in jobs:
            req, best = _matching_request(tr + te, world, job)
            if req is None:
                continue
            template = next(r for r in tr if int(r.job_id[3:]) == job)
            from dataclasses import replace

            oracle = {c["talent_id"]: oracle_score(world, replace(template, talent_id=c["talent_id"])) for c in req["candidates"]}
            assert max(oracle, key=oracle.get) == best
            results = json.loads(svc.handle_line(json.dumps(req)))["results"]
            hits += results[0]["talent_id"] == best
            total += 1
        assert total >= 5
        wins += hits / total >= 0.5
    assert wins >= 4

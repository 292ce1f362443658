"""End-to-end run through the command line: generate, train, eval, then serve
and send a handful of ranking requests built from the test split.

    python3 scripts/smoke.py --workdir /tmp/rank-moe-smoke
"""

import argparse
import json
import socket
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def cli(*args: str) -> None:
    print("$ rank-moe " + " ".join(args), flush=True)
    subprocess.run([sys.executable, "-m", "rank_moe.cli", *args], check=True)


def main() -> None:
    p = argparse.ArgumentParser(description="end-to-end smoke run")
    p.add_argument("--workdir", default="smoke-run")
    p.add_argument("--config", default=str(ROOT / "configs" / "smoke.conf"))
    p.add_argument("--requests", type=int, default=5)
    args = p.parse_args()

    work = Path(args.workdir).resolve()
    work.mkdir(parents=True, exist_ok=True)
    conf = work / "run.conf"
    conf.write_text(Path(args.config).read_text() + f"\ndata_dir = {work / 'data'}\ncheckpoint = {work / 'model.bin'}\n")

    cli("generate", "--config", str(conf))
    cli("train", "--config", str(conf))
    cli("eval", "--config", str(conf), "--out", str(work / "eval.csv"))

    server = subprocess.Popen([sys.executable, "-m", "rank_moe.cli", "serve", "--config", str(conf), "--listen", "127.0.0.1:0"],
                              stdout=subprocess.PIPE, text=True)
    try:
        host, port = server.stdout.readline().split("\t")[1].strip().rsplit(":", 1)
        sessions: dict[str, list[dict]] = {}
        for line in (work / "data" / "test.jsonl").read_text().splitlines():
            r = json.loads(line)
            sessions.setdefault(r["session_id"], []).append(r)
        with socket.create_connection((host, int(port))) as sock:
            f = sock.makefile("rwb")
            for group in list(sessions.values())[: args.requests]:
                first = group[0]
                req = {k: first[k] for k in ("recruiter_id", "role", "query_id", "job_id", "jd_text", "history_talent_ids")}
                req["candidates"] = [{"talent_id": r["talent_id"], "resume_text": r["resume_text"]} for r in group]
                f.write(json.dumps(req).encode() + b"\n")
                f.flush()
                top = json.loads(f.readline())["results"][:3]
                print(first["session_id"], " ".join(f"{r['talent_id']}:{r['final_score']:.3f}" for r in top))
    finally:
        server.terminate()
        server.wait()


if __name__ == "__main__":
    main()

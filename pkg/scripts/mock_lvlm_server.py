#!/usr/bin/env python3
"""Standalone scripted mock of the vision-language inference service.

Answers every POST with {"text": <label>} where the label is either a
fixed string (--answer) or cycled from a comma-separated script
(--script). Useful for exercising `xdora lvlm-classify` without a real
model behind it:

  python scripts/mock_lvlm_server.py --port 8808 --script "TI,TC,TO,TS" &
  export XDORA_LVLM_ENDPOINT=http://127.0.0.1:8808/
  xdora lvlm-classify --prompts prompts.jsonl --out preds.jsonl
"""

import argparse
import itertools
import json
from http.server import BaseHTTPRequestHandler, HTTPServer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8808)
    ap.add_argument("--answer", default=None,
                    help="fixed label to return for every request")
    ap.add_argument("--script", default=None,
                    help="comma-separated labels, cycled per request")
    args = ap.parse_args()

    if args.script:
        answers = itertools.cycle(args.script.split(","))
    else:
        answers = itertools.repeat(args.answer or "0")

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            self.rfile.read(length)
            body = json.dumps({"text": next(answers)}).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *a):
            print(f"[mock-lvlm] {fmt % a}")

    server = HTTPServer((args.host, args.port), Handler)
    print(f"[mock-lvlm] serving on http://{args.host}:{args.port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()

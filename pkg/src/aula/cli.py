"""Command-line entry points: prepare, validate, serve, simulate, analyze.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from .analytics import aggregate_engagement, classify_activities, message_metrics
from .errors import AulaError
from .offline import offline_gateway
from .package import approve_all, load_package, save_package, validate_package
from .pipeline import InstructorInput, PipelineConfig, PreparationPipeline
from .session import run_headless
from .transcript import read_transcript

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(AulaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: A003 - argparse API
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="aula", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_prepare = sub.add_parser("prepare", help="compile a deck directory into a package")
    p_prepare.add_argument("deck_dir")
    p_prepare.add_argument("--out", default=None, help="output package path (.zip)")
    p_prepare.add_argument("--deck-id", default=None)
    p_prepare.add_argument("--no-visual", action="store_true")
    p_prepare.add_argument("--no-context", action="store_true")
    p_prepare.add_argument("--questions-per-page", type=int, default=1)
    p_prepare.add_argument("--persona-notes", default="")
    p_prepare.add_argument("--material", action="append", default=[],
                           help="path to an extended material text file (repeatable)")
    p_prepare.add_argument("--approve-all", action="store_true",
                           help="blanket-approve every generated artifact")
    p_prepare.add_argument("--provider-config", default=None,
                           help="service config file for a real provider (default: offline mock)")

    p_validate = sub.add_parser("validate", help="validate a package archive")
    p_validate.add_argument("package")

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("config")

    p_sim = sub.add_parser("simulate", help="run a headless classroom over a package")
    p_sim.add_argument("package")
    p_sim.add_argument("--turns", type=int, required=True)
    p_sim.add_argument("--mode", choices=["continuous", "interactive"], default="continuous")
    p_sim.add_argument("--tau", type=float, default=8.0)
    p_sim.add_argument("--no-role-desc", action="store_true",
                       help="omit role descriptions from the manager context")
    p_sim.add_argument("--say", action="append", default=[], metavar="TURN:TEXT",
                       help="scripted student message before the given turn (repeatable)")
    p_sim.add_argument("--out", default=None, help="transcript output path (.jsonl)")
    p_sim.add_argument("--session-id", default=None)

    p_analyze = sub.add_parser("analyze", help="compute metrics over transcripts")
    p_analyze.add_argument("transcripts", nargs="+")
    return parser


def _load_deck(deck_dir: str) -> list[tuple[int, bytes]]:
    root = Path(deck_dir)
    if not root.is_dir():
        raise UsageError(f"not a directory: {deck_dir}")
    pages: list[tuple[int, bytes]] = []
    files = sorted(root.glob("*.png"))
    if not files:
        raise UsageError(f"no .png pages in {deck_dir}")
    for fallback, path in enumerate(files, start=1):
        match = re.search(r"(\d+)", path.stem)
        index = int(match.group(1)) if match else fallback
        pages.append((index, path.read_bytes()))
    return pages


def _gateway(provider_config: str | None):
    if provider_config is None:
        return offline_gateway()
    from .service import build_gateway, load_config
    return build_gateway(load_config(provider_config))


def _cmd_prepare(args) -> int:
    pages = _load_deck(args.deck_dir)
    materials = []
    for path in args.material:
        materials.append((Path(path).stem, Path(path).read_text(encoding="utf-8")))
    inputs = InstructorInput(
        persona_notes=args.persona_notes,
        extended_materials=tuple(materials),
    )
    cfg = PipelineConfig(
        no_visual=args.no_visual,
        no_context=args.no_context,
        questions_per_page=args.questions_per_page,
    )
    deck_id = args.deck_id or Path(args.deck_dir).name
    pipeline = PreparationPipeline(_gateway(args.provider_config), cfg)
    pkg, run = pipeline.prepare(deck_id, pages, inputs)
    if args.approve_all:
        pkg = approve_all(pkg)
        run.advance("done")
    out = Path(args.out) if args.out else Path(f"{deck_id}.zip")
    out.write_bytes(save_package(pkg))
    report = validate_package(pkg)
    print(f"wrote {out} ({len(pkg.pages)} pages, {len(pkg.script)} script items, "
          f"stage={run.stage}, publishable={report.publishable})")
    return EXIT_OK


def _print_report(report) -> None:
    for issue in report.errors:
        print(f"ERROR   {issue.ref}: {issue.code}: {issue.message}")
    for issue in report.warnings:
        print(f"WARNING {issue.ref}: {issue.code}: {issue.message}")
    print(f"publishable: {str(report.publishable).lower()}")


def _cmd_validate(args) -> int:
    pkg = load_package(Path(args.package).read_bytes())
    report = validate_package(pkg)
    _print_report(report)
    return EXIT_VALIDATION if report.errors else EXIT_OK


def _cmd_serve(args) -> int:
    from .service import load_config, serve

    handle = serve(load_config(args.config))
    print(f"serving on {handle.base_url} (Ctrl-C to stop)")
    try:
        while True:
            import time
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    handle.stop()
    return EXIT_OK


def _parse_says(raw: list[str]) -> dict[int, str]:
    says: dict[int, str] = {}
    for item in raw:
        turn, sep, text = item.partition(":")
        if not sep or not turn.isdigit():
            raise UsageError(f"--say expects TURN:TEXT, got {item!r}")
        says[int(turn)] = text
    return says


def _cmd_simulate(args) -> int:
    pkg = load_package(Path(args.package).read_bytes())
    report = validate_package(pkg)
    if not report.publishable:
        _print_report(report)
        print("package is not publishable; approve it first", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(args.out) if args.out else Path(args.package).with_suffix(".transcript.jsonl")
    if out.exists():
        out.unlink()
    transcript = run_headless(
        pkg, args.mode, turns=args.turns, says=_parse_says(args.say),
        tau=args.tau, gateway=offline_gateway(), session_id=args.session_id,
        transcript_path=out, include_role_descriptions=not args.no_role_desc)
    utterances = transcript.utterances()
    teacher_turns = sum(1 for u in utterances if u.speaker == "teacher")
    print(f"wrote {out} ({len(transcript.records)} records, "
          f"{len(utterances)} utterances, {teacher_turns} by the teacher)")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    for path in args.transcripts:
        transcript = read_transcript(path)
        records = message_metrics(transcript)
        activity = classify_activities(transcript)
        print(f"{path}:")
        for r in records:
            if r.defined:
                print(f"  module {r.module_id}: MsgNum={r.msg_num} "
                      f"MsgLenMean={r.msg_len_mean:.2f} "
                      f"log(MsgNum)={r.log_msg_num:.4f} "
                      f"log(MsgLen)={r.log_msg_len:.4f}")
            else:
                print(f"  module {r.module_id}: MsgNum=0 (log metrics undefined)")
        agg = aggregate_engagement(records)
        print(f"  aggregate: {json.dumps(agg, sort_keys=True)}")
        if activity.ratios is None:
            print("  activities: none")
        else:
            ratios = " ".join(
                f"{label}={activity.ratios[label]:.2f}" for label in sorted(activity.ratios))
            print(f"  activities: {ratios} (n={activity.total})")
    return EXIT_OK


_COMMANDS = {
    "prepare": _cmd_prepare,
    "validate": _cmd_validate,
    "serve": _cmd_serve,
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_RUNTIME
    except AulaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

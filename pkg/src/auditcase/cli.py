"""Command-line interface: ``auditcase run|resume|report|eval|validate|serve``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from auditcase.errors import AuditCaseError, StageFailed

logger = logging.getLogger("auditcase")


def _load_config(path: str):
    from auditcase.config import PipelineConfig

    return PipelineConfig.load(path)


def _gateway_from(config_path: str | None, transcript: str | None):
    """Gateway for eval commands: a scripted transcript or the pipeline config's backend."""
    from auditcase.llm.backends import ScriptedBackend, ScriptedTranscript
    from auditcase.llm.gateway import Gateway

    if transcript:
        return Gateway(ScriptedBackend(ScriptedTranscript.load(transcript)))
    if config_path:
        return _load_config(config_path).gateway()
    raise click.UsageError("give --config or --transcript")


def _emit(data, out: str | None) -> None:
    text = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Audit-case instruction drafting pipeline and check-eval metric."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _finish(report, figures: str | None) -> None:
    from auditcase import reporting

    if figures:
        out = Path(figures)
        reporting.plot_stage_costs(report, out / "stage_costs.png")
        reporting.write_stage_csv(report, out / "stages.csv")
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workspace", default="workspace", show_default=True, help="Workspace root directory.")
@click.option("--figures", type=click.Path(file_okay=False), help="Write stage cost figure and CSV here.")
def run(bundle_dir: str, config_path: str, workspace: str, figures: str | None) -> None:
    """Run the full pipeline on a case bundle."""
    from auditcase.pipeline import run_case

    try:
        report = run_case(bundle_dir, _load_config(config_path), workspace)
    except StageFailed as exc:
        click.echo(f"error: stage {exc.stage} failed: {exc.cause}", err=True)
        sys.exit(2)
    except AuditCaseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    _finish(report, figures)


@main.command()
@click.argument("case_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("stage")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--figures", type=click.Path(file_okay=False))
def resume(case_dir: str, stage: str, config_path: str, figures: str | None) -> None:
    """Rerun STAGE and its dependents in the case workspace CASE_DIR."""
    from auditcase.pipeline import resume_stage

    try:
        report = resume_stage(case_dir, stage, _load_config(config_path))
    except StageFailed as exc:
        click.echo(f"error: stage {exc.stage} failed: {exc.cause}", err=True)
        sys.exit(2)
    except (AuditCaseError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    _finish(report, figures)


@main.command()
@click.argument("case_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("section")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def regenerate(case_dir: str, section: str, config_path: str) -> None:
    """Redraft one instruction SECTION (BasicInfo, ClaimsRequests, Admissibility, Precautionary, Recommendations)."""
    from auditcase.pipeline import regenerate_instruction_section
    from auditcase.validation import SectionId

    try:
        draft = regenerate_instruction_section(case_dir, SectionId(section), _load_config(config_path))
    except (AuditCaseError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps({s.section_id.value: s.inputs_digest for s in draft.sections}, indent=2))


@main.command()
@click.argument("case_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--figures", required=True, type=click.Path(file_okay=False))
def report(case_dir: str, figures: str) -> None:
    """Render the latest run report of CASE_DIR as a figure and CSV."""
    from auditcase.pipeline import CaseWorkspace, RunReport

    ws = CaseWorkspace(case_dir)
    if not ws.report_path.is_file():
        raise click.ClickException(f"no run report in {case_dir}")
    _finish(RunReport.from_dict(json.loads(ws.report_path.read_text(encoding="utf-8"))), figures)


# -- eval ------------------------------------------------------------------------


@main.group(name="eval")
def eval_group() -> None:
    """Check-eval scoring, aggregation and benchmark correlation."""


_backend_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="Pipeline config whose backend is used."),
    click.option("--transcript", type=click.Path(exists=True, dir_okay=False),
                  help="Scripted transcript instead of a live backend."),
]


def _with_backend(fn):
    for opt in reversed(_backend_options):
        fn = opt(fn)
    return fn


@eval_group.command()
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--candidate", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write the scores JSON here.")
@_with_backend
def score(reference: str, candidate: str, out: str | None, config_path: str | None, transcript: str | None) -> None:
    """Score CANDIDATE against REFERENCE; prints {precision, recall, f1}."""
    from auditcase.checkeval import score_pair

    gateway = _gateway_from(config_path, transcript)
    scores = score_pair(Path(reference).read_text(encoding="utf-8"),
                        Path(candidate).read_text(encoding="utf-8"), gateway)
    _emit(scores.to_dict(), out)


@eval_group.command()
@click.option("--scores", "scores_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of score JSON files written by 'eval score'.")
@click.option("--figures", type=click.Path(file_okay=False), help="Write distribution figure and CSVs here.")
@click.option("--out", type=click.Path(dir_okay=False))
def aggregate(scores_dir: str, figures: str | None, out: str | None) -> None:
    """Mean, sample std, min and max per metric over a directory of scores."""
    from auditcase import reporting
    from auditcase.checkeval import EvalScores, aggregate_stats

    files = sorted(Path(scores_dir).glob("*.json"))
    scores = []
    for f in files:
        d = json.loads(f.read_text(encoding="utf-8"))
        scores.append(EvalScores.from_pr(float(d["precision"]), float(d["recall"])))
    try:
        stats = aggregate_stats(scores)
    except AuditCaseError as exc:
        raise click.ClickException(f"{exc} (no *.json files in {scores_dir})") from exc
    if figures:
        fig_dir = Path(figures)
        reporting.plot_score_distribution(scores, fig_dir / "score_distribution.png")
        reporting.write_stats_csv(stats, fig_dir / "aggregate.csv")
        reporting.write_scores_csv([f.stem for f in files], scores, fig_dir / "scores.csv")
    _emit({m: s.to_dict() for m, s in stats.items()}, out)


@eval_group.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON lines with reference, candidate and a human_scores map.")
@click.option("--metric", type=click.Choice(["precision", "recall", "f1"]), default="f1", show_default=True)
@click.option("--figures", type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@_with_backend
def benchmark(dataset: str, metric: str, figures: str | None, out: str | None,
              config_path: str | None, transcript: str | None) -> None:
    """Correlate check-eval scores with human judgments per dimension."""
    from auditcase import reporting
    from auditcase.checkeval import benchmark_harness

    rows = [json.loads(line) for line in Path(dataset).read_text(encoding="utf-8").splitlines() if line.strip()]
    results = benchmark_harness(rows, _gateway_from(config_path, transcript), metric=metric)
    if figures:
        fig_dir = Path(figures)
        reporting.plot_correlations(results, fig_dir / "correlations.png")
        reporting.write_correlations_csv(results, fig_dir / "correlations.csv")
    _emit({d: r.to_dict() for d, r in results.items()}, out)


# -- validate --------------------------------------------------------------------


@main.group()
def validate() -> None:
    """Validation-set construction from reference instructions."""


@validate.command()
@click.argument("docs_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--schema", type=click.Path(exists=True, dir_okay=False), help="Form schema JSON.")
@click.option("--parser-config", type=click.Path(exists=True, dir_okay=False), help="Header/label patterns JSON.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def build(docs_dir: str, out: str, schema: str | None, parser_config: str | None, figures: bool) -> None:
    """Parse every instruction in DOCS_DIR into records.jsonl, labels.csv and errors.json."""
    from auditcase import reporting
    from auditcase.extraction import FormSchema
    from auditcase.validation import (
        DEFAULT_PARSER,
        ParserConfig,
        build_validation_table,
        load_instruction_dir,
        write_jsonl,
        write_labels_csv,
    )

    cfg = DEFAULT_PARSER
    if parser_config:
        cfg = ParserConfig.from_json(json.loads(Path(parser_config).read_text(encoding="utf-8")))
    records, errors = build_validation_table(load_instruction_dir(docs_dir), FormSchema.load(schema), cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, out_dir / "records.jsonl")
    write_labels_csv(records, out_dir / "labels.csv")
    (out_dir / "errors.json").write_text(json.dumps([e.to_dict() for e in errors], indent=2) + "\n",
                                         encoding="utf-8")
    if figures and records:
        reporting.plot_label_distribution(records, out_dir / "label_distribution.png")
    click.echo(json.dumps({"records": len(records), "errors": len(errors)}))


# -- serve -----------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workspace", default="workspace", show_default=True)
@click.option("--addr", default="127.0.0.1:8080", show_default=True, help="host:port to listen on.")
def serve(config_path: str, workspace: str, addr: str) -> None:
    """Serve the pipeline over HTTP."""
    from auditcase.service import serve as serve_app

    serve_app(_load_config(config_path), workspace, addr)


if __name__ == "__main__":
    main()

import json
import pathlib
from typing import Callable, Optional, TextIO

from rich.console import Console
from rich.table import Table

from .metrics import EvalReport


def format_metric(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def report_rows(report: EvalReport):
    for m in report.images:
        yield (
            m.frame_id,
            m.camera_id,
            format_metric(m.psnr, 2),
            format_metric(m.psnr_masked, 2),
            format_metric(m.ssim),
            format_metric(m.depth_error),
        )
    yield (
        "mean",
        f"{report.count} images",
        format_metric(report.psnr, 2),
        format_metric(report.psnr_masked, 2),
        format_metric(report.ssim),
        format_metric(report.depth_error),
    )


COLUMNS = ("frame", "camera", "PSNR", "PSNR (mask)", "SSIM", "DE")


class ReportWriter:
    extension: str

    def __init__(self, output_dir: str):
        self.output_dir = output_dir

    def __call__(self, report: EvalReport, output_name: str = "report"):
        output_path = (pathlib.Path(self.output_dir) / output_name).with_suffix(
            f".{self.extension}"
        )
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with output_path.open("wt", encoding="utf-8") as f:
            self.write_report(report, file=f)
        return output_path

    def write_report(self, report: EvalReport, file: TextIO):
        raise NotImplementedError


class WriteJSON(ReportWriter):
    extension: str = "json"

    def write_report(self, report: EvalReport, file: TextIO):
        json.dump(report.model_dump(mode="json"), file, indent=2)


class WriteTXT(ReportWriter):
    """Fixed-width plain-text table, one row per image plus the mean."""

    extension: str = "txt"

    def write_report(self, report: EvalReport, file: TextIO):
        print(f"mode: {report.mode.value}", file=file)
        widths = [12, 12, 8, 12, 8, 8]
        print("".join(c.ljust(w) for c, w in zip(COLUMNS, widths)).rstrip(), file=file)
        for row in report_rows(report):
            print("".join(v.ljust(w) for v, w in zip(row, widths)).rstrip(), file=file)


def report_table(report: EvalReport) -> Table:
    table = Table(title=f"Evaluation ({report.mode.value})")
    for name in COLUMNS:
        table.add_column(name, justify="right" if name not in ("frame", "camera") else "left")
    for row in report_rows(report):
        table.add_row(*row)
    return table


def print_report(report: EvalReport, console: Optional[Console] = None) -> None:
    (console or Console()).print(report_table(report))


def get_writer(output_format: str, output_dir: str) -> Callable[[EvalReport, str], None]:
    writers = {
        "txt": WriteTXT,
        "json": WriteJSON,
    }

    if output_format == "all":
        all_writers = [writer(output_dir) for writer in writers.values()]

        def write_all(report: EvalReport, output_name: str = "report"):
            for writer in all_writers:
                writer(report, output_name)

        return write_all

    return writers[output_format](output_dir)

import json
import textwrap
from pathlib import Path

import pytest

from gflow.catalog import builtin_catalog_path, load_catalog

TOY_WORKFLOW = textwrap.dedent(
    """\
    testsamplesize : 3

    rule download:
        output: ["{sampleID}.fastq"]
        shell: "echo reads-for-{sampleID} > {output}"

    rule align:
        input: ["{sampleID}.fastq"]
        output: ["{sampleID}.bam"]
        shell: "tr a-z A-Z < {input} > {output}"

    rule refine:
        input: ["{sampleID}.bam"]
        output: ["{sampleID}.final.bam"]
        shell: "cat {input} > {output} && echo refined >> {output}"
    """
)

TOY_WORKLOAD = {
    "seed": 7,
    "rules": {
        "download": {"duration_hours": "0.5", "peak_cpu": 1, "peak_mem_gb": 2, "peak_disk_gb": 40},
        "align": {"duration_hours": 4, "peak_cpu": "3.5", "peak_mem_gb": 12, "peak_disk_gb": 180},
        "refine": {"duration_hours": 1, "peak_cpu": 2, "peak_mem_gb": 8, "peak_disk_gb": 60},
    },
}


@pytest.fixture(scope="session")
def sample_catalog():
    return load_catalog(builtin_catalog_path())


@pytest.fixture()
def tmp_store_root(tmp_path) -> Path:
    root = tmp_path / "store"
    root.mkdir()
    return root


@pytest.fixture()
def toy_files(tmp_path):
    """Workflow file, sample list, and workload spec for lifecycle tests."""
    wf = tmp_path / "toy.workflow"
    wf.write_text(TOY_WORKFLOW)
    samples = tmp_path / "samples.txt"
    samples.write_text("# toy cohort\nS1\nS2\nS3\nS4\nS5\n")
    workload = tmp_path / "workload.json"
    workload.write_text(json.dumps(TOY_WORKLOAD))
    return {"workflow": wf, "samples": samples, "workload": workload, "dir": tmp_path}

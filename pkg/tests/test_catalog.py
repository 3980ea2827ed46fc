import json
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gflow import errors
from gflow.catalog import (
    DISK_CLASSES,
    FAMILY_MEM_RATIO,
    SUPPORTED_SERIES,
    MachineCatalog,
    catalog_from_data,
    feasible_machines,
    load_catalog,
    parse_machine_name,
)


@pytest.mark.parametrize(
    "name,expected",
    [
        ("e2-standard-16", ("e2", "standard", 16, 64)),
        ("n2-highmem-16", ("n2", "highmem", 16, 128)),
        ("e2-standard-4", ("e2", "standard", 4, 16)),
        ("n2-standard-4", ("n2", "standard", 4, 16)),
        ("n1-highcpu-32", ("n1", "highcpu", 32, 32)),
    ],
)
def test_parse_machine_name_shapes(name, expected):
    assert parse_machine_name(name) == expected


def test_unsupported_series():
    with pytest.raises(errors.UnsupportedSeries):
        parse_machine_name("c2-standard-4")


def test_unknown_family():
    with pytest.raises(errors.UnknownFamily):
        parse_machine_name("e2-mega-4")


@pytest.mark.parametrize("name", ["", "e2", "e2-standard", "e2-standard-", "e2-standard-04", "e2_standard_4", "e2-standard-4-extra"])
def test_malformed_names(name):
    with pytest.raises(errors.MalformedName):
        parse_machine_name(name)


@given(
    series=st.sampled_from(SUPPORTED_SERIES),
    family=st.sampled_from(sorted(FAMILY_MEM_RATIO)),
    vcpu=st.integers(min_value=1, max_value=999),
)
def test_parse_total_over_name_language(series, family, vcpu):
    name = f"{series}-{family}-{vcpu}"
    got = parse_machine_name(name)
    assert got == (series, family, vcpu, vcpu * FAMILY_MEM_RATIO[family])


def _write_catalog(tmp_path, data):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(data))
    return path


BASE_DISKS = [
    {"class": "standard", "price_per_gb_hour": "0.00005"},
    {"class": "balanced", "price_per_gb_hour": "0.0001"},
    {"class": "ssd", "price_per_gb_hour": "0.0002"},
]


def test_load_catalog_derives_memory(tmp_path):
    path = _write_catalog(
        tmp_path,
        {"machines": [{"name": "n2-standard-4", "price_per_hour": 0.20}], "disks": BASE_DISKS},
    )
    cat = load_catalog(path)
    m = cat.machine("n2-standard-4")
    assert (m.series, m.family, m.vcpu) == ("n2", "standard", 4)
    assert m.mem_gb == 16
    assert m.price_per_hour == Fraction(Decimal("0.20"))


def test_load_catalog_duplicate_machine(tmp_path):
    path = _write_catalog(
        tmp_path,
        {
            "machines": [
                {"name": "e2-standard-4", "price_per_hour": 0.1},
                {"name": "e2-standard-4", "price_per_hour": 0.2},
            ],
            "disks": BASE_DISKS,
        },
    )
    with pytest.raises(errors.DuplicateMachine):
        load_catalog(path)


def test_load_catalog_inconsistent_shape(tmp_path):
    path = _write_catalog(
        tmp_path,
        {"machines": [{"name": "n2-standard-4", "price_per_hour": 0.2, "mem_gb": 99}], "disks": BASE_DISKS},
    )
    with pytest.raises(errors.InconsistentShape):
        load_catalog(path)


def test_load_catalog_memory_override(tmp_path):
    path = _write_catalog(
        tmp_path,
        {
            "machines": [{"name": "n2-standard-4", "price_per_hour": 0.2, "mem_gb": 99, "override": True}],
            "disks": BASE_DISKS,
        },
    )
    assert load_catalog(path).machine("n2-standard-4").mem_gb == 99


def test_load_catalog_requires_all_disk_classes(tmp_path):
    path = _write_catalog(
        tmp_path,
        {"machines": [], "disks": BASE_DISKS[:2]},
    )
    with pytest.raises(errors.CatalogParseError, match="ssd"):
        load_catalog(path)


def test_load_catalog_bad_json(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text("{nope")
    with pytest.raises(errors.CatalogParseError):
        load_catalog(path)


def test_feasible_machines_filter_and_order(sample_catalog):
    got = feasible_machines(sample_catalog, Fraction("3.84"), Fraction("14.4"))
    names = [m.name for m in got]
    assert "e2-standard-4" in names and "n2-highmem-16" in names
    assert names.index("e2-standard-4") < names.index("n2-highmem-16")
    # every result satisfies both needs, cheapest first
    prices = [m.price_per_hour for m in got]
    assert prices == sorted(prices)
    assert all(m.vcpu >= Fraction("3.84") and m.mem_gb >= Fraction("14.4") for m in got)


def test_feasible_machines_vacuous_needs(sample_catalog):
    got = feasible_machines(sample_catalog, 0, 0)
    assert len(got) == len(sample_catalog.machines)
    assert [m.price_per_hour for m in got] == sorted(m.price_per_hour for m in got)


def test_feasible_machines_infeasible(sample_catalog):
    assert feasible_machines(sample_catalog, 64, 0) == []


def _mk_catalog(entries):
    machines = [{"name": n, "price_per_hour": p} for n, p in entries]
    return catalog_from_data({"machines": machines, "disks": BASE_DISKS})


machine_names = st.builds(
    lambda s, f, v: f"{s}-{f}-{v}",
    st.sampled_from(SUPPORTED_SERIES),
    st.sampled_from(sorted(FAMILY_MEM_RATIO)),
    st.integers(min_value=1, max_value=96),
)


@settings(max_examples=150)
@given(
    entries=st.dictionaries(machine_names, st.decimals(min_value=0, max_value=20, places=4), min_size=1, max_size=50),
    need_vcpu=st.integers(min_value=0, max_value=128),
    need_mem=st.integers(min_value=0, max_value=1024),
)
def test_feasible_matches_brute_force(entries, need_vcpu, need_mem):
    catalog = _mk_catalog([(n, str(p)) for n, p in entries.items()])
    got = feasible_machines(catalog, need_vcpu, need_mem)
    brute = sorted(
        (m for m in catalog.machines if m.vcpu >= need_vcpu and m.mem_gb >= need_mem),
        key=lambda m: (m.price_per_hour, m.vcpu, m.name),
    )
    assert got == brute


@settings(max_examples=60)
@given(
    entries=st.dictionaries(machine_names, st.decimals(min_value=0, max_value=20, places=4), min_size=1, max_size=30),
    need_vcpu=st.integers(min_value=0, max_value=64),
    lo=st.integers(min_value=0, max_value=256),
    hi=st.integers(min_value=0, max_value=256),
)
def test_raising_memory_need_never_adds_machines(entries, need_vcpu, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    catalog = _mk_catalog([(n, str(p)) for n, p in entries.items()])
    small = {m.name for m in feasible_machines(catalog, need_vcpu, lo)}
    big = {m.name for m in feasible_machines(catalog, need_vcpu, hi)}
    assert big <= small


def test_disk_price_lookup(sample_catalog):
    assert sample_catalog.disk_price("balanced") > 0
    with pytest.raises(errors.UnknownDiskClass):
        sample_catalog.disk_price("tape")


def test_all_disk_classes_present(sample_catalog):
    assert {d.disk_class for d in sample_catalog.disks} == set(DISK_CLASSES)


def test_catalog_type(sample_catalog):
    assert isinstance(sample_catalog, MachineCatalog)
    assert all(m.price_per_hour >= 0 for m in sample_catalog.machines)

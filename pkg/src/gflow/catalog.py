"""Machine-type catalog: name parsing, shapes, and pricing.

Supported compute shapes follow the `<series>-<family>-<vcpu>` naming used
by GCP general-purpose VMs, restricted to the e2/n2/n1 series. Memory is
derived from a fixed GB-per-vCPU ratio per family unless a catalog entry
explicitly overrides it. Prices are always catalog data: they vary by region
and date, so nothing in this module hard-codes a real price.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path

from .errors import (
    CatalogParseError,
    DuplicateMachine,
    InconsistentShape,
    MalformedName,
    UnknownDiskClass,
    UnknownFamily,
    UnsupportedSeries,
)
from .rational import to_frac

SUPPORTED_SERIES = ("e2", "n2", "n1")
DISK_CLASSES = ("standard", "balanced", "ssd")

# GB of memory per vCPU for each family.
FAMILY_MEM_RATIO = {"standard": 4, "highmem": 8, "highcpu": 1}

_NAME_RE = re.compile(r"^([a-z][a-z0-9]*)-([a-z]+)-([0-9]+)$")


@dataclass(frozen=True)
class MachineType:
    name: str
    series: str
    family: str
    vcpu: int
    mem_gb: Fraction
    price_per_hour: Fraction


@dataclass(frozen=True)
class DiskPrice:
    disk_class: str
    price_per_gb_hour: Fraction


@dataclass(frozen=True)
class MachineCatalog:
    machines: tuple[MachineType, ...]
    disks: tuple[DiskPrice, ...]
    currency: str = "$"

    def machine(self, name: str) -> MachineType:
        for m in self.machines:
            if m.name == name:
                return m
        raise MalformedName(f"machine {name!r} not in catalog")

    def has_machine(self, name: str) -> bool:
        return any(m.name == name for m in self.machines)

    def disk_price(self, disk_class: str) -> Fraction:
        for d in self.disks:
            if d.disk_class == disk_class:
                return d.price_per_gb_hour
        raise UnknownDiskClass(f"unknown disk class {disk_class!r}")


def parse_machine_name(name: str) -> tuple[str, str, int, int]:
    """Split `<series>-<family>-<n>` into (series, family, vcpu, mem_gb).

    Memory is the family ratio times the vCPU count; e.g. e2-standard-16
    is (e2, standard, 16, 64).
    """
    m = _NAME_RE.match(name)
    if not m:
        raise MalformedName(f"malformed machine name {name!r}; expected <series>-<family>-<vcpu>")
    series, family, vcpu_s = m.groups()
    if series not in SUPPORTED_SERIES:
        raise UnsupportedSeries(f"unsupported series {series!r} in {name!r}; supported: {', '.join(SUPPORTED_SERIES)}")
    if family not in FAMILY_MEM_RATIO:
        raise UnknownFamily(f"unknown family {family!r} in {name!r}; supported: {', '.join(FAMILY_MEM_RATIO)}")
    if vcpu_s.startswith("0"):
        raise MalformedName(f"malformed vCPU count in {name!r}")
    vcpu = int(vcpu_s)
    return series, family, vcpu, vcpu * FAMILY_MEM_RATIO[family]


def _decimal(value, what: str) -> Fraction:
    try:
        if isinstance(value, float):
            # Guard against float literals sneaking in from hand-built dicts.
            value = Decimal(str(value))
        return to_frac(Decimal(value) if isinstance(value, str) else value)
    except (InvalidOperation, TypeError, ValueError) as exc:
        raise CatalogParseError(f"bad numeric value for {what}: {value!r}") from exc


def catalog_from_data(data: dict) -> MachineCatalog:
    """Build a catalog from already-parsed data (see load_catalog for the schema)."""
    if not isinstance(data, dict):
        raise CatalogParseError("catalog root must be an object")
    currency = data.get("currency", "$")
    machines: list[MachineType] = []
    seen: set[str] = set()
    for entry in data.get("machines", []):
        name = entry.get("name")
        if not isinstance(name, str):
            raise CatalogParseError(f"machine entry missing name: {entry!r}")
        if name in seen:
            raise DuplicateMachine(f"duplicate machine {name!r}")
        seen.add(name)
        series, family, vcpu, ratio_mem = parse_machine_name(name)
        price = _decimal(entry.get("price_per_hour"), f"{name} price_per_hour")
        if price < 0:
            raise CatalogParseError(f"negative price for {name!r}")
        mem = Fraction(ratio_mem)
        if "mem_gb" in entry:
            declared = _decimal(entry["mem_gb"], f"{name} mem_gb")
            if declared != mem and not entry.get("override", False):
                raise InconsistentShape(
                    f"{name}: declared mem_gb {entry['mem_gb']} != family-ratio {ratio_mem} GB "
                    "(set override: true to keep the declared value)"
                )
            mem = declared
        machines.append(MachineType(name, series, family, vcpu, mem, price))
    disks: list[DiskPrice] = []
    for entry in data.get("disks", []):
        cls = entry.get("class")
        if cls not in DISK_CLASSES:
            raise UnknownDiskClass(f"unknown disk class {cls!r}")
        disks.append(DiskPrice(cls, _decimal(entry.get("price_per_gb_hour"), f"{cls} disk price")))
    present = {d.disk_class for d in disks}
    missing = [c for c in DISK_CLASSES if c not in present]
    if missing:
        raise CatalogParseError(f"catalog must price all disk classes; missing: {', '.join(missing)}")
    return MachineCatalog(machines=tuple(machines), disks=tuple(disks), currency=currency)


def load_catalog(path: str | Path) -> MachineCatalog:
    """Load a machine/disk price catalog from a JSON file.

    Schema: {"currency": "$", "machines": [{"name", "price_per_hour",
    "mem_gb"?, "override"?}], "disks": [{"class", "price_per_gb_hour"}]}.
    Prices are parsed as decimals so catalog figures stay exact.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogParseError(f"cannot read catalog {path}: {exc}") from exc
    try:
        data = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise CatalogParseError(f"catalog {path} is not valid JSON: {exc}") from exc
    return catalog_from_data(data)


def feasible_machines(catalog: MachineCatalog, need_vcpu, need_mem_gb) -> list[MachineType]:
    """All machines satisfying both needs, cheapest first.

    Sort key is (price_per_hour, vcpu, name) so ties resolve deterministically.
    Needs may be fractional; machine vCPU counts stay integral.
    """
    need_vcpu = to_frac(need_vcpu)
    need_mem_gb = to_frac(need_mem_gb)
    fits = [m for m in catalog.machines if m.vcpu >= need_vcpu and m.mem_gb >= need_mem_gb]
    fits.sort(key=lambda m: (m.price_per_hour, m.vcpu, m.name))
    return fits


def builtin_catalog_path() -> Path:
    """Path of the sample catalog shipped with the package.

    Sample prices are illustrative only; real deployments should supply a
    catalog exported for their region and billing date.
    """
    return Path(__file__).parent / "data" / "sample_catalog.json"

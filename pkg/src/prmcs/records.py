"""JSON Lines dataset I/O for caption records.

One record per line: {"id","lang","caption","critical_objects","image_id"}.
Perturbed files carry three extra provenance fields {"kind","seed","p"}.
"""

from __future__ import annotations

import json
import os
from typing import Iterable

from .errors import InvalidRecord
from .textproc import CaptionRecord


def record_to_dict(record: CaptionRecord, seed: int | None = None, p: float | None = None) -> dict:
    d = {
        "id": record.id,
        "lang": record.lang,
        "caption": record.caption,
        "critical_objects": list(record.critical_objects),
        "image_id": record.image_id,
    }
    if record.kind is not None:
        d["kind"] = record.kind
        if seed is not None:
            d["seed"] = seed
        if p is not None:
            d["p"] = p
    return d


def record_from_dict(d: dict) -> CaptionRecord:
    try:
        rec = CaptionRecord(
            id=str(d["id"]),
            lang=str(d["lang"]),
            caption=str(d["caption"]),
            critical_objects=[str(o) for o in d.get("critical_objects", [])],
            image_id=str(d.get("image_id", "")),
            kind=d.get("kind"),
        )
    except KeyError as exc:
        raise InvalidRecord(f"missing field {exc.args[0]!r}") from None
    rec.validate()
    return rec


def read_records(path: str) -> list[CaptionRecord]:
    """Load a JSONL dataset, enforcing record invariants and id uniqueness.

    Errors name the offending 1-based line number.
    """
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                rec = record_from_dict(d)
            except (json.JSONDecodeError, InvalidRecord) as exc:
                raise InvalidRecord(f"{path}:{lineno}: {exc}") from None
            key = (rec.id, rec.kind)
            if key in seen:
                raise InvalidRecord(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(key)
            records.append(rec)
    return records


def write_atomic(path: str, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_jsonl(path: str, dicts: Iterable[dict]) -> None:
    lines = [json.dumps(d, ensure_ascii=False, sort_keys=True) for d in dicts]
    payload = ("\n".join(lines) + "\n") if lines else ""
    write_atomic(path, payload.encode("utf-8"))


def write_records(
    path: str,
    records: Iterable[CaptionRecord],
    seed: int | None = None,
    p: float | None = None,
) -> None:
    write_jsonl(path, (record_to_dict(r, seed=seed, p=p) for r in records))

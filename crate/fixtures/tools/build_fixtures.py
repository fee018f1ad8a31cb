#!/usr/bin/env python3
"""Regenerate fixture documents and their layout files from fixtures/src/*.txt.

Source format: pages separated by a line "==== page ====", paragraphs by blank
lines, and a block whose lines all start with "|" is a table.

Each fixture document is a small pseudo-PDF wrapping the source text; its layout
file is named <sha256 of the document>.layout.json. The script also prints an
independent rendering of the ordered text (paragraphs joined by blank lines,
tables row-per-line with " | ") so the manifest can pin lengths and counts.
"""
import hashlib
import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent
SRC = ROOT / "src"
LAYOUTS = ROOT / "layouts"

# Words at even positions in these documents carry no confidence field.
OMIT_CONFIDENCE = {"paper_E"}


def confidence(p, q, l, w):
    return round(0.80 + ((p * 7 + q * 5 + l * 3 + w) % 20) / 100, 2)


def parse(name, text):
    pages = []
    tables = []
    raw_pages = text.split("==== page ====\n")
    for pi, raw in enumerate(raw_pages, start=1):
        paragraphs = []
        blocks = [b for b in raw.split("\n\n") if b.strip()]
        for block in blocks:
            lines = [ln for ln in block.split("\n") if ln.strip()]
            if all(ln.startswith("|") for ln in lines):
                rows = [[c.strip() for c in ln.strip().strip("|").split("|")] for ln in lines]
                tables.append({"page": pi, "rows": rows})
                continue
            para = {"lines": []}
            for li, ln in enumerate(lines):
                words = []
                for wi, tok in enumerate(ln.split()):
                    word = {"text": tok}
                    if not (name in OMIT_CONFIDENCE and wi % 2 == 0):
                        word["confidence"] = confidence(pi, len(paragraphs), li, wi)
                    words.append(word)
                para["lines"].append({"words": words})
            paragraphs.append(para)
        pages.append({"number": pi, "paragraphs": paragraphs})
    return {"pages": pages, "tables": tables}


def render(layout):
    blocks = []
    for page in layout["pages"]:
        for para in page["paragraphs"]:
            blocks.append("\n".join(" ".join(w["text"] for w in line["words"]) for line in para["lines"]))
        for table in layout["tables"]:
            if table["page"] == page["number"]:
                blocks.append("\n".join(" | ".join(row) for row in table["rows"]))
    return "\n\n".join(blocks)


def main():
    LAYOUTS.mkdir(exist_ok=True)
    for old in LAYOUTS.glob("*.layout.json"):
        old.unlink()
    for src in sorted(SRC.glob("*.txt")):
        name = src.stem
        text = src.read_text(encoding="utf-8")
        doc = b"%PDF-1.4\n%juvenotes fixture " + name.encode() + b"\n" + text.encode() + b"%%EOF\n"
        (ROOT / f"{name}.pdf").write_bytes(doc)
        sha = hashlib.sha256(doc).hexdigest()
        layout = parse(name, text)
        (LAYOUTS / f"{sha}.layout.json").write_text(json.dumps(layout, indent=2) + "\n", encoding="utf-8")
        rendered = render(layout)
        paragraphs = sum(len(p["paragraphs"]) for p in layout["pages"])
        print(json.dumps({
            "name": name,
            "sha256": sha,
            "pages": len(layout["pages"]),
            "paragraphs": paragraphs,
            "tables": len(layout["tables"]),
            "text_chars": len(rendered),
        }))


if __name__ == "__main__":
    main()

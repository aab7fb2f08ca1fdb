"""Reader for the INI-like text format shared by problem and scenario files.

``[section]`` headers, ``key = value`` lines, ``#`` comments. Every key keeps
its line number so that errors can point at it.
"""

from __future__ import annotations


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{message}" + (f" ({', '.join(where)})" if where else ""))
        self.line = line
        self.key = key


Section = tuple[str, int, dict[str, tuple[str, int]]]


def read_sections(text: str, error=ConfigError) -> list[Section]:
    """Sections in file order as (name, line, {key: (value, line)})."""
    sections: list[Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise error("unterminated section header", lineno)
            sections.append((line[1:-1].strip(), lineno, {}))
            continue
        if "=" not in line:
            raise error("expected key = value", lineno)
        if not sections:
            raise error("key outside of any section", lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        entries = sections[-1][2]
        if key in entries:
            raise error("duplicate key", lineno, key)
        entries[key] = (val.strip(), lineno)
    return sections

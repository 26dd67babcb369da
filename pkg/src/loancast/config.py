"""Text form of config dataclasses.

Values are written one per line as ``key = value`` inside ``[section]``
headers. Tuples of ints are comma separated (``16, 32, 256``); tuples of
windows use ``x`` between extents (``1x2x2, 1x2x2, 2x2x2``); an empty tuple
is ``none``; booleans accept on/off, true/false, yes/no, 1/0. ``#`` starts a
comment, also after a value when preceded by whitespace.
"""
import configparser
import dataclasses

from .errors import ContractError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text):
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    t = text.strip().lower()
    if t in ("", "none", "off"):
        return ()
    return tuple(int(v) for v in t.replace(" ", "").split(","))


def _parse_window_tuple(text):
    return tuple(tuple(int(e) for e in part.strip().split("x")) for part in text.split(","))


def parse_value(default, text):
    """Parse ``text`` into the type of ``default``."""
    if isinstance(default, bool):
        return parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return _parse_window_tuple(text)
        return _parse_int_tuple(text)
    if default is None or isinstance(default, str):
        text = text.strip()
        return None if text.lower() == "none" and default is None else text
    raise TypeError(f"unsupported config type {type(default).__name__}")


def format_value(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        if not value:
            return "none"
        if isinstance(value[0], tuple):
            return ", ".join("x".join(str(e) for e in w) for w in value)
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def to_section(obj):
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_mapping(cls, mapping, where="config"):
    """Build ``cls`` from string values; unknown keys are rejected."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in mapping.items():
        if key not in names:
            raise ContractError(f"unknown key {key!r} in {where}")
        try:
            kwargs[key] = parse_value(getattr(defaults, key), text)
        except (TypeError, ValueError) as exc:
            raise ContractError(f"bad value for {key!r} in {where}: {exc}") from None
    return dataclasses.replace(defaults, **kwargs)


def dumps(sections):
    """Render ``{section: dataclass}`` as config text."""
    lines = []
    for name, obj in sections.items():
        lines.append(f"[{name}]")
        for key, value in to_section(obj).items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def read_sections(text, source="<config>"):
    """Parse config text into ``{section: {key: value}}``; errors name the line."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ContractError(f"{source}: line {lineno}: cannot parse") from None
    except configparser.Error as exc:
        raise ContractError(f"{source}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def line_of(text, section, key):
    """1-based line number of ``key`` inside ``[section]`` (``None`` if absent)."""
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and "=" in line and line.split("=", 1)[0].strip() == key:
            return i
    return None

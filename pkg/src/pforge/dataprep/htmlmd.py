"""Best-effort HTML to Markdown conversion.

Mapping: <p> paragraphs separated by blank lines; <br> newline; <b>/<strong>
bold; <i>/<em> italic; <code> inline backticks; <pre> fenced block;
<a href=u>t</a> links; <li> dash items; <blockquote> "> " prefixes. Unknown
tags are stripped with their text kept, entities are decoded, and anything
the tolerant parser cannot interpret passes through as text.

The converter is idempotent on its own output, since that output contains
no tags. Text that spells out tag-like fragments (a literal "<b" arriving
via "&lt;b") is the known exception: a second pass would re-parse it.
"""

from __future__ import annotations

from html.parser import HTMLParser

INLINE_WRAP = {"b": "**", "strong": "**", "i": "*", "em": "*"}
VOID_TAGS = {"br", "hr", "img", "meta", "link", "input"}
LIST_TAGS = {"ul", "ol"}
BLOCK_TAGS = {"p", "pre", "blockquote", "li"} | LIST_TAGS


class _Node:
    __slots__ = ("tag", "attrs", "children")

    def __init__(self, tag: str, attrs: dict[str, str | None]):
        self.tag = tag
        self.attrs = attrs
        self.children: list["_Node | str"] = []


class _TreeBuilder(HTMLParser):
    """Builds a forgiving DOM: stray close tags are ignored, unclosed tags
    are closed at the end."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.root = _Node("", {})
        self.stack = [self.root]

    def handle_starttag(self, tag, attrs):
        node = _Node(tag, dict(attrs))
        self.stack[-1].children.append(node)
        if tag not in VOID_TAGS:
            self.stack.append(node)

    def handle_startendtag(self, tag, attrs):
        self.stack[-1].children.append(_Node(tag, dict(attrs)))

    def handle_endtag(self, tag):
        for depth in range(len(self.stack) - 1, 0, -1):
            if self.stack[depth].tag == tag:
                del self.stack[depth:]
                return
        # stray close: keep going

    def handle_data(self, data):
        self.stack[-1].children.append(data)


def _raw_text(node: _Node) -> str:
    out = []
    for child in node.children:
        out.append(child if isinstance(child, str) else _raw_text(child))
    return "".join(out)


def _prefix_lines(text: str, prefix: str) -> str:
    return "\n".join(prefix + line for line in text.split("\n"))


def _render_node(node: _Node) -> tuple[bool, str]:
    """Returns (is_block, markdown)."""
    tag = node.tag
    if tag == "br":
        return False, "\n"
    if tag in INLINE_WRAP:
        inner = _render_flow(node.children).strip()
        mark = INLINE_WRAP[tag]
        return False, f"{mark}{inner}{mark}" if inner else ""
    if tag == "code":
        inner = _raw_text(node).strip()
        return False, f"`{inner}`" if inner else ""
    if tag == "a":
        inner = _render_flow(node.children).strip()
        href = node.attrs.get("href")
        if not href:
            return False, inner
        return False, f"[{inner}]({href})"
    if tag == "pre":
        inner = _raw_text(node).strip("\n")
        return True, f"```\n{inner}\n```"
    if tag == "p":
        return True, _render_flow(node.children).strip()
    if tag == "blockquote":
        inner = _render_flow(node.children).strip()
        return True, _prefix_lines(inner, "> ") if inner else ""
    if tag in LIST_TAGS:
        items = []
        for child in node.children:
            if isinstance(child, _Node) and child.tag == "li":
                items.append("- " + _render_flow(child.children).strip())
            elif isinstance(child, str) and not child.strip():
                continue
            else:
                rendered = (_render_node(child)[1] if isinstance(child, _Node)
                            else child.strip())
                if rendered:
                    items.append(rendered)
        return True, "\n".join(items)
    if tag == "li":
        # li outside a list still becomes an item line
        return True, "- " + _render_flow(node.children).strip()
    # unknown tag: transparent, children rendered in place
    return False, _render_flow(node.children)


def _render_flow(children: list[_Node | str]) -> str:
    # (is_block, text, from_text_node); only source-text whitespace is
    # droppable formatting, a <br> newline is content
    pieces: list[tuple[bool, str, bool]] = []
    for child in children:
        if isinstance(child, str):
            pieces.append((False, child, True))
        else:
            is_block, text = _render_node(child)
            pieces.append((is_block, text, False))
    pieces = [p for p in pieces if p[1] != ""]
    kept: list[tuple[bool, str]] = []
    for i, (is_block, text, from_text) in enumerate(pieces):
        if from_text and not text.strip():
            before = i > 0 and pieces[i - 1][0]
            after = i + 1 < len(pieces) and pieces[i + 1][0]
            boundary = i == 0 or i == len(pieces) - 1
            if before or after or boundary:
                continue
            kept.append((False, " "))
            continue
        kept.append((is_block, text))
    out = ""
    prev_block = False
    for i, (is_block, text) in enumerate(kept):
        if i and (is_block or prev_block):
            out = out.rstrip("\n") + "\n\n"
        out += text
        prev_block = is_block
    return out


def html_to_markdown(html: str) -> str:
    """Convert an HTML fragment to Markdown text per the module mapping."""
    builder = _TreeBuilder()
    builder.feed(html)
    builder.close()
    return _render_flow(builder.root.children).strip()

"""Prompt rendering from candidates, the filtered history and item metadata."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import EmptyCandidates

WITH_PROFILE_TEMPLATE = """\
I want you to predict the user‘s rating for each movie in the candidate list on a scale from 1 to 100, based on the user’s profile and movie interaction history. Follow these instructions carefully:
1. Use the given user profile and historical movie interaction records to predict how much the user would like each movie in the candidate list. The higher the score, the more likely the user will enjoy the movie.
2. The output must be in valid JSON format, where each movie ID is paired with its predicted score.  The format should be:
{ "movie_id1": score1, 
"movie_id2" : score2,
...}
3. Ensure that all movie IDs in the candidate list are included exactly once in the output.
4. Do not include any additional text, explanation, or comments outside the JSON object.
### User Profile:
{user_profile_text}.
### Movie Interaction History:
The user's historical movie interaction records include:{history_movies}
### Candidate List:
{candidate_list}
Predict and output the ratings in the required JSON format."""

HISTORY_ONLY_TEMPLATE = """\
I want you to predict the user‘s rating for each movie in the candidate list on a scale from 1 to 100,  based on the user’s interaction history. Follow these instructions carefully:
1. Use the given user‘s historical movie interaction records to predict how much the user would like each movie in the candidate list. The higher the score, the more likely the user will enjoy the movie.
2. The output must be in valid JSON format, where each movie ID is paired with its predicted score. 
The format should be:
{ "movie_id1" : score1,
  "movie_id2" : score2,
...}
3. Ensure that all movie IDs in the candidate list are included exactly once in the output.
4. Do not include any additional text, explanation, or comments outside the JSON object.
### Movie Interaction History:
The user's historical movie interaction records include:
{history_movies}
### Candidate List: {candidate_list}
Predict and output the ratings in the required JSON format."""

TEMPLATES = {"with_profile": WITH_PROFILE_TEMPLATE, "history_only": HISTORY_ONLY_TEMPLATE}

HISTORY_HEADER = "### Movie Interaction History:"
CANDIDATE_HEADER = "### Candidate List:"
_CANDIDATE_LINE = re.compile(r'^(-?\d+): "(.*)"$')


@dataclass(frozen=True)
class AuxContext:
    user_profile_text: str | None = None
    item_titles: dict = field(default_factory=dict)
    item_categories: dict = field(default_factory=dict)
    item_year: dict = field(default_factory=dict)

    @classmethod
    def from_metadata(cls, metadata, user_profile_text=None):
        if metadata is None:
            return cls(user_profile_text)
        cats = metadata.categories.item_to_categories
        return cls(user_profile_text, metadata.titles, cats, metadata.years)

    def with_profile(self, text):
        return AuxContext(text, self.item_titles, self.item_categories, self.item_year)

    def title(self, item_id):
        return self.item_titles.get(int(item_id)) or f"item {item_id}"


@dataclass(frozen=True)
class Prompt:
    text: str
    candidate_ids: tuple
    template_kind: str
    token_estimate: int
    user_id: int | None = None
    history_ids: tuple = ()
    history_lines: tuple = ()

    def history_section(self):
        start = self.text.find(HISTORY_HEADER)
        end = self.text.find(CANDIDATE_HEADER, start)
        return self.text[start:end] if start >= 0 and end >= 0 else ""

    def candidate_section(self):
        start = self.text.find(CANDIDATE_HEADER)
        return self.text[start + len(CANDIDATE_HEADER):] if start >= 0 else ""

    def parsed_candidate_ids(self):
        ids = []
        for line in self.candidate_section().splitlines():
            m = _CANDIDATE_LINE.match(line.strip())
            if m:
                ids.append(int(m.group(1)))
        return ids

    def dump(self, directory):
        """Write ``u<user_id>.prompt.txt`` into ``directory`` for auditing."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"u{self.user_id}.prompt.txt"
        path.write_text(self.text, encoding="utf-8")
        return path


def render_history_line(interaction, aux):
    """``"<title>" (<categories>, <year>) — rated <rating>/5``; missing parts are omitted."""
    item = interaction.item_id
    parts = []
    cats = aux.item_categories.get(item)
    if cats:
        parts.append("/".join(sorted(cats)))
    year = aux.item_year.get(item)
    if year is not None:
        parts.append(str(year))
    paren = f" ({', '.join(parts)})" if parts else ""
    return f'"{aux.title(item)}"{paren} — rated {interaction.rating}/5'


def _inline(block):
    return "\n" + block if block else ""


def build_prompt(candidates, history, aux=None):
    """Fill the appropriate template for one user.

    The history section lists the kept interactions in timestamp order; the
    candidate section lists ``<id>: "<title>"`` lines in backbone order.
    """
    aux = aux or AuxContext()
    cand_ids = tuple(int(i) for i in candidates)
    if not cand_ids:
        raise EmptyCandidates("cannot build a prompt without candidates")
    kept = sorted(history, key=lambda x: (x.timestamp, x.item_id))
    lines = tuple(render_history_line(x, aux) for x in kept)
    history_block = "\n".join(lines)
    cand_block = "\n".join(f'{i}: "{aux.title(i)}"' for i in cand_ids)
    if aux.user_profile_text:
        kind = "with_profile"
        text = (WITH_PROFILE_TEMPLATE
                .replace("{user_profile_text}", aux.user_profile_text)
                .replace("{history_movies}", _inline(history_block))
                .replace("{candidate_list}", cand_block))
    else:
        kind = "history_only"
        text = (HISTORY_ONLY_TEMPLATE
                .replace("{history_movies}", history_block)
                .replace("{candidate_list}", _inline(cand_block)))
    user = getattr(candidates, "user_id", None)
    if user is None:
        user = getattr(history, "user_id", None)
    return Prompt(text, cand_ids, kind, math.ceil(len(text) / 4), user,
                  tuple(x.item_id for x in kept), lines)


def scan_leakage(prompt, forgotten_items, aux=None):
    """Forgotten item ids that surface in the prompt's history section.

    Checks the recorded history ids, the ``item <id>`` fallback form, and that
    the history section contains exactly the recorded lines and nothing else.
    """
    aux = aux or AuxContext()
    forgotten = {int(i) for i in forgotten_items}
    leaked = {i for i in prompt.history_ids if i in forgotten}
    section = prompt.history_section()
    for i in forgotten:
        if re.search(rf'"item {i}"', section):
            leaked.add(i)
    body = [ln for ln in section.splitlines()[2:] if ln.strip()]
    first = section.splitlines()[1] if len(section.splitlines()) > 1 else ""
    tail = first.split("include:", 1)[1] if "include:" in first else ""
    if tail.strip():
        body.insert(0, tail)
    if tuple(body) != tuple(prompt.history_lines):
        # The section holds lines that were not rendered from kept interactions.
        extra = set(body) - set(prompt.history_lines)
        for i in forgotten:
            if any(ln.startswith(f'"{aux.title(i)}"') for ln in extra):
                leaked.add(i)
        if extra and not leaked:
            leaked.add(-1)
    return sorted(leaked)

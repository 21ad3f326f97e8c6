"""Edit-distance scoring of recognition output.

Alignment uses unit costs for substitution, deletion and insertion;
among minimum-cost alignments the backtrace prefers fewer
substitutions, then fewer insertions, so counts are deterministic.
Reports carry both HTK-style Correctness (N-S-D)/N and Accuracy
(N-S-D-I)/N; the character recognition rate quoted elsewhere in this
toolkit is the Accuracy figure, since it charges insertions too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


def edit_alignment(reference, hypothesis):
    """Align two token sequences; returns (subs, dels, ins, pairs).

    `pairs` lists (ref_token, hyp_token) with None on the missing side
    of a deletion or insertion. Costs are compared lexicographically as
    (total, substitutions, insertions), realised as packed integers so
    the inner loop stays cheap.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    nr, nh = len(ref), len(hyp)
    base = nr + nh + 1  # strict bound on any count, keeps packing collision-free
    base2 = base * base

    # dp[i][j] = packed (cost, subs, ins) of aligning ref[:i] with hyp[:j]
    dp = [[0] * (nh + 1) for _ in range(nr + 1)]
    for j in range(1, nh + 1):
        dp[0][j] = j * base2 + j  # j insertions
    for i in range(1, nr + 1):
        dp[i][0] = i * base2  # i deletions
        row = dp[i]
        prev = dp[i - 1]
        ri = ref[i - 1]
        for j in range(1, nh + 1):
            if ri == hyp[j - 1]:
                best = prev[j - 1]
            else:
                best = prev[j - 1] + base2 + base  # substitution
            cand = prev[j] + base2  # deletion
            if cand < best:
                best = cand
            cand = row[j - 1] + base2 + 1  # insertion
            if cand < best:
                best = cand
            row[j] = best

    packed = dp[nr][nh]
    subs = (packed // base) % base
    ins = packed % base
    dels = packed // base2 - subs - ins

    pairs = []
    i, j = nr, nh
    while i > 0 or j > 0:
        here = dp[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and here == dp[i - 1][j - 1]:
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == dp[i - 1][j - 1] + base2 + base:
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and here == dp[i - 1][j] + base2:
            pairs.append((ref[i - 1], None))
            i -= 1
        else:
            pairs.append((None, hyp[j - 1]))
            j -= 1
    pairs.reverse()
    return subs, dels, ins, pairs


@dataclass
class EvalReport:
    granularity: str
    n_ref: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0
    lines: int = 0
    lines_correct: int = 0
    per_utterance: list = field(default_factory=list)  # (S, D, I, N)

    @property
    def correctness(self) -> float:
        if self.n_ref == 0:
            return 1.0 if self.subs + self.dels == 0 else 0.0
        return (self.n_ref - self.subs - self.dels) / self.n_ref

    @property
    def accuracy(self) -> float:
        if self.n_ref == 0:
            return 1.0 if self.subs + self.dels + self.ins == 0 else 0.0
        return (self.n_ref - self.subs - self.dels - self.ins) / self.n_ref

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy

    @property
    def lrr(self) -> float:
        return self.lines_correct / self.lines if self.lines else 0.0


def tokenize(text: str, granularity: str, space_symbol: str = " "):
    if granularity == "character":
        return list(text)
    if granularity == "word":
        return [w for w in text.split(space_symbol) if w]
    if granularity == "line":
        return [text]
    raise ValueError(f"unknown granularity {granularity!r}")


def score_corpus(results, granularity: str = "character", space_symbol: str = " ") -> EvalReport:
    """Aggregate alignment counts over (reference, hypothesis) pairs.

    A line counts as correct iff reference and hypothesis are equal,
    which coincides with a zero-error character alignment.
    """
    results = list(results)
    if not results:
        raise ValueError("nothing to score")
    report = EvalReport(granularity=granularity)
    for ref, hyp in results:
        rt = tokenize(ref, granularity, space_symbol)
        ht = tokenize(hyp, granularity, space_symbol)
        s, d, i, _ = edit_alignment(rt, ht)
        report.n_ref += len(rt)
        report.subs += s
        report.dels += d
        report.ins += i
        report.lines += 1
        report.lines_correct += int(ref == hyp)
        report.per_utterance.append((s, d, i, len(rt)))
    return report


def format_report(report: EvalReport) -> str:
    head = f"granularity: {report.granularity}"
    counts = (f"N={report.n_ref} S={report.subs} D={report.dels} I={report.ins} "
              f"lines={report.lines} lines_correct={report.lines_correct}")
    rates = (f"correctness={100.0 * report.correctness:.2f}% "
             f"accuracy={100.0 * report.accuracy:.2f}% "
             f"lrr={100.0 * report.lrr:.2f}%")
    return "\n".join([head, counts, rates]) + "\n"


def report_dict(report: EvalReport) -> dict:
    return {
        "granularity": report.granularity,
        "N": report.n_ref,
        "S": report.subs,
        "D": report.dels,
        "I": report.ins,
        "correctness": report.correctness,
        "accuracy": report.accuracy,
        "lrr": report.lrr,
    }


def save_report_json(reports, path) -> None:
    """One JSON object per granularity, keyed by granularity name."""
    payload = {r.granularity: report_dict(r) for r in reports}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

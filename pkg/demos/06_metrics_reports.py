#!/usr/bin/env python3
"""WER, CER, chrF and the report tables."""

from slmforge.metrics import MetricRow, cer, chrf, render_report, wer

refs = ["the cat sat on the mat", "speech systems are fun"]
hyps = ["the cat sat on a mat", "speech system are fun"]

print(f"WER:  {wer(refs, hyps):.4f}")
print(f"CER:  {cer(refs, hyps):.4f}")
print(f"chrF: {chrf(refs, hyps):.2f}")

print("\nedge cases:")
print(f"   identical pair WER  = {wer(['a b'], ['a b'])}")
print(f"   empty hypothesis WER = {wer(['a'], [''])}")
print(f"   identical chrF       = {chrf(['abcd'], ['abcd'])}")
print(f"   disjoint chrF        = {chrf(['aaaa'], ['bbbb'])}")

rows = [
    MetricRow(name="greedy", wer=wer(refs, hyps) * 100, cer=cer(refs, hyps) * 100,
              chrf=chrf(refs, hyps), n_utterances=len(refs)),
    MetricRow(name="beam-4", wer=9.0, cer=4.1, chrf=91.2, n_utterances=len(refs)),
]
print("\n" + render_report(rows))
print(render_report(rows, fmt="json"))

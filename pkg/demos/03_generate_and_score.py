"""
Generating a small corpus and scoring it
========================================

Run the batch generator over the six shipped sample records, then score the
two ordering strategies against the record labels and compare them with a
paired exact McNemar test. With scripted agents every answer is truthful, so
both strategies should recover the labels exactly.
"""

import tempfile
from pathlib import Path

from psydiag import GenerationJob, Strategy, generate_dataset, load_emrs
from psydiag.cli import shipped_sample_emrs
from psydiag.metrics import dialogue_stats, evaluate_corpus, read_corpus, read_gold

emrs = load_emrs(shipped_sample_emrs())
out = Path(tempfile.mkdtemp(prefix="psydiag-demo-"))
summary = generate_dataset(GenerationJob(emrs, out, feds_per_emr=5, seed_base=3))
print(f"{summary.eligible}/{summary.attempted} sessions eligible, written to {summary.corpus_path}")

corpus = read_corpus(summary.corpus_path)
gold = read_gold(summary.gold_path)
by_strategy = {s: [x for x in corpus if x.strategy is s] for s in Strategy}

for strategy, sessions in by_strategy.items():
    stats = dialogue_stats(sessions)
    print(
        f"{strategy.value:>17}: {len(sessions)} sessions, {stats.avg_turns:.1f} turns on average, "
        f"doctor {stats.avg_chars_doctor:.0f} / patient {stats.avg_chars_patient:.0f} chars per turn"
    )

# McNemar pairs sessions by id, so strip the strategy suffix before comparing.
random_runs = by_strategy[Strategy.RANDOM]
informed_runs = by_strategy[Strategy.SYMPTOM_INFORMED]
paired_gold = {s.session_id: gold[s.session_id] for s in random_runs}
renamed = [
    type(s).from_dict({**s.to_dict(), "session_id": s.session_id.replace("symptom_informed", "random")})
    for s in informed_runs
]
report = evaluate_corpus(random_runs, paired_gold, baseline=renamed)
print(f"\nsubset accuracy (random order): {report.subset_accuracy:.3f}")
for label, prf in report.per_label.items():
    print(f"  {label.value:<5} P={prf.precision:.2f} R={prf.recall:.2f} F1={prf.f1:.2f}")
print(f"McNemar p against symptom-informed order: {report.mcnemar_p}")

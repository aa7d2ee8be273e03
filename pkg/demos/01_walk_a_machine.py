"""
Walking one diagnostic machine by hand
======================================

Load the shipped depression machine, answer its questions from a fixed set
of "present" symptoms and watch the cursor move. Inside the symptom group the
next question is drawn at random, so the order changes with the seed while
the final terminal does not.
"""

import random

from psydiag import Answer, DisorderLabel, init_runtime, load_shipped_machines
from psydiag.statemachine import apply_response, current_topic, position_in_group, render_question

machines = load_shipped_machines()
mdd = machines[DisorderLabel.MDD]
print(f"{len(mdd.nodes)} questions, {len(mdd.groups)} groups, entry at {mdd.entry}")

# A patient with low mood, loss of interest and six of the grouped symptoms.
# A13 only leads on to its follow-up A13Y, which this patient denies, so the
# group tally ends at five: just enough to reach the threshold.
present = {"A1", "A1Y", "A2Y", "A3", "A6", "A12", "A13", "A16", "A23"}

for seed in (1, 2):
    rt = init_runtime(mdd)
    rng = random.Random(seed)
    print(f"\n--- seed {seed}")
    while not rt.finished:
        node = current_topic(rt)
        answer = Answer.PRESENT if node.id in present else Answer.ABSENT
        print(f"{node.id:>5}  {answer.value:<7}  {render_question(node, position_in_group(rt))}")
        apply_response(rt, answer, rng)
    print(f"terminal: {rt.terminal} ({mdd.terminals[rt.terminal].description})")
    print(f"group tallies: {rt.group_tallies}")

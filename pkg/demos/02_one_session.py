"""
A single simulated consultation
===============================

Build a synthetic record for a patient with depression and anxiety, derive a
background story for them, and let the scripted doctor and patient talk it
through. The transcript is long, so only the opening, a stretch from the
middle and the closing turns are printed.
"""

from psydiag import DisorderLabel, doctor_profile, run_session
from psydiag.orchestrator import generate_fed, render_narrative
from psydiag.synth import synthetic_emr

emr = synthetic_emr([DisorderLabel.MDD, DisorderLabel.AD], seed=42, emr_id="demo-patient")
print("chief complaint:", emr.chief_complaint)
print("recorded symptoms:", ", ".join(sorted(emr.symptom_ids)))

experiences, histories = generate_fed(emr)
fed = render_narrative(histories[0], experiences[3])
print("\nbackground story:", fed.narrative)

session = run_session(emr, fed, doctor_profile(2), "symptom_informed", seed=7)


def show(turns):
    for t in turns:
        tag = f"[{t.topic_state}]" if t.topic_state else ""
        print(f"{t.index:>3} {t.role.value:<7} {tag:<12} {t.text}")


print(f"\n{len(session.turns)} turns")
show(session.turns[:6])
print("...")
show(session.turns[40:46])
print("...")
show(session.turns[-2:])

print("\nfinal terminals:", {k.value: v for k, v in session.final_diagnoses.items()})
print("predicted:", sorted(x.value for x in session.predicted_labels))
print("recorded:", sorted(x.value for x in emr.preliminary_diagnosis))

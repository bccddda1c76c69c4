#!/usr/bin/env python3
"""Regenerates the synthetic record fixtures and stub scripts under data/fixtures.

Everything is seeded, so rerunning produces identical files.
"""
import json
import random
from decimal import Decimal, ROUND_HALF_EVEN
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "fixtures"
BUCKET_MIN = 480  # 48 h / 6 buckets
PLAUSIBLE = {"oxygen_saturation": (0, 100), "fraction_inspired_oxygen": (0.2, 1.0), "ph": (6.3, 8.4),
             "glasgow_coma_scale_total": (3, 15)}


def shown(x):
    return Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


def solve_bucket(target, step, rng, max_n=16, lo=None, hi=None):
    """Values on a `step` grid whose mean displays as `target`; prefers many events."""
    want = Decimal(str(target)).quantize(Decimal("0.01"))
    for n in range(max_n, 0, -1):
        for k in range(-3, 4):
            s = round(target * n / step) + k
            if shown(s * step / n) != want:
                continue
            base, extra = divmod(s, n)
            units = [base + (1 if i < extra else 0) for i in range(n)]
            # spread around the mean, keeping the sum
            for _ in range(n):
                i, j = rng.randrange(n), rng.randrange(n)
                d = rng.randint(0, 2)
                if i != j and (units[j] - d) * step >= (lo or step) and (hi is None or (units[i] + d) * step <= hi):
                    units[i] += d
                    units[j] -= d
            return [round(u * step, 6) for u in units]
    raise ValueError(f"no grid solution for {target}")


def events_for(feature, targets, step, rng, unit=None):
    out = []
    for b, target in enumerate(targets):
        if target is None:
            continue
        lo, hi = PLAUSIBLE.get(feature, (None, None))
        vals = solve_bucket(target, step, rng, lo=lo, hi=hi)
        gap = BUCKET_MIN // (len(vals) + 1)
        for i, v in enumerate(vals):
            ev = {"feature": feature, "t_min": b * BUCKET_MIN + gap * (i + 1), "value": v}
            if unit:
                ev["unit"] = unit
            out.append(ev)
    return out


def reference_record():
    rng = random.Random(1)
    rows = [
        ("heart_rate", [76.09, 78.75, 76.88, 69.75, 69.0, None], 1),
        ("respiratory_rate", [19.19, 16.62, 16.62, 17.5, 16.0, None], 1),
        ("systolic_blood_pressure", [136.71, 129.94, 140.71, 144.56, 147.0, None], 1),
        ("diastolic_blood_pressure", [65.25, 56.06, 59.69, 55.81, 56.0, None], 1),
        ("mean_blood_pressure", [85.62, 76.5, 80.42, 78.5, 79.0, None], 1),
        ("oxygen_saturation", [97.08, 96.38, 96.62, 96.38, 96.0, None], 1),
        ("temperature", [36.68, 36.56, 37.06, None, 37.0, None], 0.1),
        ("glucose", [165.0, 127.0, 128.0, None, None, None], 1),
        ("glasgow_coma_scale_total", [11.0, None, None, None, None, None], 1),
        ("ph", [7.4, None, None, None, None, None], 0.1),
        ("fraction_inspired_oxygen", [0.21, None, None, None, None, None], 0.01),
    ]
    events = []
    for feature, targets, step in rows:
        events += events_for(feature, targets, step, rng)
    # one reading charted in Fahrenheit; 98.6 F converts to 37.0 C
    events.append({"feature": "temperature", "t_min": 3 * BUCKET_MIN + 60, "value": 98.6, "unit": "F"})
    events.sort(key=lambda e: (e["t_min"], e["feature"]))
    return {
        "format_version": 1,
        "id": "fig1",
        "note": "Admitted from the emergency department with community-acquired pneumonia. "
                "On supplemental oxygen overnight, mentating slowly.",
        "events": events,
        "statics": {"weight": 90.0, "height": 170.0},
        "label": "0",
        "split": "test",
    }


def splits(n):
    # 25% train, 25% dev, rest test
    q = n // 4
    return ["train"] * q + ["dev"] * q + ["test"] * (n - 2 * q)


SMOKING_CUES = [
    ("smokes a pack daily", "Current smoker"),
    ("quit tobacco years ago", "Past smoker"),
    ("denies any tobacco", "Non-smoker"),
    ("tobacco use is documented", "Smoker"),
    ("social history not obtained", "Unknown"),
]
SMOKING_FILLER = [
    "Presented with chest pain radiating to the left arm.",
    "Admitted for management of a COPD exacerbation.",
    "History of type 2 diabetes on metformin.",
    "Transferred after elective knee replacement.",
    "Evaluated for new onset atrial fibrillation.",
]


def smoking_records(rng, n=40):
    recs = []
    for i, split in enumerate(splits(n)):
        cue, gold = SMOKING_CUES[i % len(SMOKING_CUES)]
        # a few notes whose cue disagrees with the chart label
        if i % 9 == 4:
            cue = SMOKING_CUES[(i + 1) % len(SMOKING_CUES)][0]
        note = f"{rng.choice(SMOKING_FILLER)} Patient {cue}. Discharged home in stable condition."
        recs.append({"format_version": 1, "id": f"smk-{i:03d}", "note": note, "label": gold, "split": split})
    return recs


NLI_CUES = [
    ("reports no pain at rest", "Entailment"),
    ("was never hypotensive", "Contradiction"),
    ("has a family history of stroke", "Neutral"),
]
NLI_PREMISES = [
    "Patient was comfortable on the ward with stable vitals.",
    "Blood pressure dropped to 70/40 requiring fluids.",
    "Presented with sudden right-sided weakness.",
    "Underwent uncomplicated cholecystectomy.",
]


def mednli_records(rng, n=40):
    recs = []
    for i, split in enumerate(splits(n)):
        cue, gold = NLI_CUES[i % len(NLI_CUES)]
        if i % 11 == 5:
            cue = NLI_CUES[(i + 1) % len(NLI_CUES)][0]
        recs.append({"format_version": 1, "id": f"nli-{i:03d}", "note": rng.choice(NLI_PREMISES),
                     "text_b": f"The patient {cue}.", "label": gold, "split": split})
    return recs


STS_PAIRS = [
    ("Patient denies chest pain.", "No chest pain reported by the patient."),
    ("Lungs clear to auscultation bilaterally.", "Breath sounds are clear on both sides."),
    ("Continue lisinopril 10 mg daily.", "Hold anticoagulation before surgery."),
    ("Follow up with cardiology in two weeks.", "Wound shows no signs of infection."),
]


def clinsts_records(rng, n=40):
    recs = []
    for i, split in enumerate(splits(n)):
        a, b = STS_PAIRS[i % len(STS_PAIRS)]
        paraphrase = i % len(STS_PAIRS) < 2
        score = round(rng.uniform(3.1, 5.0), 1) if paraphrase else round(rng.uniform(0.0, 3.0), 1)
        if i % 13 == 6:
            score = 3.0  # boundary: not similar
        marker = "restated" if paraphrase else "unrelated"
        if i % 10 == 7:
            marker = "unrelated" if paraphrase else "restated"
        recs.append({"format_version": 1, "id": f"sts-{i:03d}", "note": f"{a} ({marker})", "text_b": b,
                     "label": score, "split": split})
    return recs


MORTALITY_CUES = [
    ("transitioned to comfort measures", 1),
    ("escalating vasopressor requirement", 1),
    ("remains intubated and sedated", 1),
    ("ambulating independently", 0),
    ("tolerating a regular diet", 0),
    ("awaiting placement for rehabilitation", 0),
]


def vital_events(rng, sick):
    events = []
    specs = [
        ("heart_rate", 110 if sick else 78, 12, 0),
        ("respiratory_rate", 24 if sick else 16, 3, 0),
        ("systolic_blood_pressure", 92 if sick else 128, 10, 0),
        ("diastolic_blood_pressure", 50 if sick else 70, 6, 0),
        ("mean_blood_pressure", 64 if sick else 89, 7, 0),
        ("oxygen_saturation", 91 if sick else 97, 2, 0),
        ("temperature", 38.2 if sick else 36.8, 0.4, 1),
        ("glucose", 180 if sick else 120, 25, 0),
        ("glasgow_coma_scale_total", 8 if sick else 15, 1, 0),
        ("ph", 7.28 if sick else 7.4, 0.03, 2),
        ("fraction_inspired_oxygen", 0.5 if sick else 0.21, 0.05, 2),
    ]
    for feature, mean, sd, digits in specs:
        for _ in range(rng.randint(2, 14)):
            t = rng.randrange(0, 48 * 60)
            v = round(rng.gauss(mean, sd), digits)
            if feature == "glasgow_coma_scale_total":
                v = float(min(15, max(3, round(v))))
            if feature == "oxygen_saturation":
                v = min(100.0, v)
            if feature == "fraction_inspired_oxygen":
                v = min(1.0, max(0.21, v))
            events.append({"feature": feature, "t_min": t, "value": v})
    # a couple of readings past the window; aggregation drops them
    events.append({"feature": "heart_rate", "t_min": 48 * 60 + rng.randrange(1, 600), "value": 80.0})
    events.sort(key=lambda e: (e["t_min"], e["feature"]))
    return events


def mortality_records(rng, n=40):
    recs = []
    for i, split in enumerate(splits(n)):
        cue, gold = MORTALITY_CUES[i % len(MORTALITY_CUES)]
        if i % 8 == 3:
            gold = 1 - gold
        sick = gold == 1
        note = f"ICU admission note. Patient {cue}. Plan discussed with family."
        recs.append({"format_version": 1, "id": f"mort-{i:03d}", "note": note, "events": vital_events(rng, sick),
                     "statics": {"weight": round(rng.uniform(50, 120), 1), "height": round(rng.uniform(150, 195))},
                     "label": str(gold), "split": split})
    return recs


def stub_script():
    # instruction proposals; these must win over the note cues quoted in the examples
    rules = [
        {"contains": "opening with a persona",
         "reply": "You are a physician working in an ICU. Read the record and give the requested label."},
        {"contains": "Emphasize conciseness", "reply": "Label the record. Reply with the label only."},
        {"contains": "Write a plain, complete instruction",
         "reply": "Read the clinical text carefully and answer the question with one of the allowed labels."},
    ]
    rules += [{"contains": c, "reply": lab} for c, lab in SMOKING_CUES[:4]]
    rules += [{"contains": c, "reply": lab.lower()} for c, lab in NLI_CUES]
    rules += [{"contains": "(restated)", "reply": "similar"}, {"contains": "(unrelated)", "reply": "Dissimilar."}]
    lp = [(-0.05, -3.2), (-0.4, -1.1), (-0.9, -0.6), (-2.5, -0.1), (-1.6, -0.25), (-0.7, -0.7)]
    for (cue, _), (yes, no) in zip(MORTALITY_CUES, lp):
        rules.append({"contains": cue, "reply": "yes" if yes > no else "no",
                      "top_logprobs": [["yes", yes], ["no", no]]})
    # time-series descriptions requested by the description template
    rules.append({"contains": "Clinical Concern", "reply": (Path(__file__).resolve().parent.parent
                                                             / "tests" / "golden" / "fig3_description.txt").read_text()})
    return {"default": "Unknown", "rules": rules}


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20241)
    write_jsonl(OUT / "fig1.jsonl", [reference_record()])
    write_jsonl(OUT / "smoking.jsonl", smoking_records(rng))
    write_jsonl(OUT / "mednli.jsonl", mednli_records(rng))
    write_jsonl(OUT / "clinsts.jsonl", clinsts_records(rng))
    write_jsonl(OUT / "mortality.jsonl", mortality_records(rng))
    (OUT / "stub_script.json").write_text(json.dumps(stub_script(), indent=2) + "\n")


if __name__ == "__main__":
    main()

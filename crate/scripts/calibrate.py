#!/usr/bin/env python3
"""Calibrate the shipped admission-count distribution and complaint weights.

Admission counts: a discretised normal over 1..10 whose (mu, sigma) are solved
so the distribution has mean 3.6 and SD 1.5. Weights are printed as
percentages with two decimals.

Complaint weights: for every comorbidity category, the per-admission category
mass p is solved by bisection so that the expected patient prevalence
1 - sum_m P(m) (1 - p)^m hits the target. Category mass is split evenly over
the codes carrying that tag; codes tagged with two categories get a fixed
share counted towards both. Whatever is left goes to the "Other" codes.

Usage: scripts/calibrate.py [--write crates/core/config]
"""

import argparse
import csv
import math
import os
import sys

TARGET_MEAN = 3.6
TARGET_SD = 1.5

PREVALENCE_TARGETS = {
    "Malignant neoplasm": 0.414,
    "Rheumatoid arthritis": 0.256,
    "Diabetes": 0.244,
    "Renal complications": 0.170,
    "Coronary artery disease": 0.070,
}

SHARED_WEIGHT = 0.5  # percent of admissions, per multi-category code

# (code, description, categories, sex_restricted)
CODES = [
    # Malignant neoplasm
    ("C18.9", "Malignant neoplasm of colon, unspecified", ["Malignant neoplasm"], "none"),
    ("C20", "Malignant neoplasm of rectum", ["Malignant neoplasm"], "none"),
    ("C22.0", "Liver cell carcinoma", ["Malignant neoplasm"], "none"),
    ("C25.9", "Malignant neoplasm of pancreas, unspecified", ["Malignant neoplasm"], "none"),
    ("C34.90", "Malignant neoplasm of unspecified part of unspecified bronchus or lung", ["Malignant neoplasm"], "none"),
    ("C43.9", "Malignant melanoma of skin, unspecified", ["Malignant neoplasm"], "none"),
    ("C45.0", "Mesothelioma of pleura", ["Malignant neoplasm"], "none"),
    ("C64.9", "Malignant neoplasm of unspecified kidney, except renal pelvis", ["Malignant neoplasm"], "none"),
    ("C67.9", "Malignant neoplasm of bladder, unspecified", ["Malignant neoplasm"], "none"),
    ("C71.9", "Malignant neoplasm of brain, unspecified", ["Malignant neoplasm"], "none"),
    ("C73", "Malignant neoplasm of thyroid gland", ["Malignant neoplasm"], "none"),
    ("C79.51", "Secondary malignant neoplasm of bone", ["Malignant neoplasm"], "none"),
    ("C80.1", "Malignant (primary) neoplasm, unspecified", ["Malignant neoplasm"], "none"),
    ("C83.30", "Diffuse large B-cell lymphoma, unspecified site", ["Malignant neoplasm"], "none"),
    ("C90.00", "Multiple myeloma not having achieved remission", ["Malignant neoplasm"], "none"),
    ("C91.10", "Chronic lymphocytic leukemia of B-cell type not having achieved remission", ["Malignant neoplasm"], "none"),
    ("C92.00", "Acute myeloblastic leukemia, not having achieved remission", ["Malignant neoplasm"], "none"),
    ("C50.911", "Malignant neoplasm of unspecified site of right female breast", ["Malignant neoplasm"], "female_only"),
    ("C53.9", "Malignant neoplasm of cervix uteri, unspecified", ["Malignant neoplasm"], "female_only"),
    ("C56.9", "Malignant neoplasm of unspecified ovary", ["Malignant neoplasm"], "female_only"),
    ("C61", "Malignant neoplasm of prostate", ["Malignant neoplasm"], "male_only"),
    ("C62.90", "Malignant neoplasm of unspecified testis, unspecified whether descended or undescended", ["Malignant neoplasm"], "male_only"),
    # Rheumatoid arthritis
    ("M05.00", "Felty's syndrome, unspecified site", ["Rheumatoid arthritis"], "none"),
    ("M05.10", "Rheumatoid lung disease with rheumatoid arthritis of unspecified site", ["Rheumatoid arthritis"], "none"),
    ("M05.30", "Rheumatoid heart disease with rheumatoid arthritis of unspecified site", ["Rheumatoid arthritis"], "none"),
    ("M05.60", "Rheumatoid arthritis of unspecified site with involvement of other organs and systems", ["Rheumatoid arthritis"], "none"),
    ("M05.79", "Rheumatoid arthritis with rheumatoid factor of multiple sites without organ or systems involvement", ["Rheumatoid arthritis"], "none"),
    ("M06.00", "Rheumatoid arthritis without rheumatoid factor, unspecified site", ["Rheumatoid arthritis"], "none"),
    ("M06.1", "Adult-onset Still's disease", ["Rheumatoid arthritis"], "none"),
    ("M06.89", "Other specified rheumatoid arthritis, multiple sites", ["Rheumatoid arthritis"], "none"),
    ("M06.9", "Rheumatoid arthritis, unspecified", ["Rheumatoid arthritis"], "none"),
    # Diabetes
    ("E10.10", "Type 1 diabetes mellitus with ketoacidosis without coma", ["Diabetes"], "none"),
    ("E10.65", "Type 1 diabetes mellitus with hyperglycemia", ["Diabetes"], "none"),
    ("E10.9", "Type 1 diabetes mellitus without complications", ["Diabetes"], "none"),
    ("E11.319", "Type 2 diabetes mellitus with unspecified diabetic retinopathy without macular edema", ["Diabetes"], "none"),
    ("E11.40", "Type 2 diabetes mellitus with diabetic neuropathy, unspecified", ["Diabetes"], "none"),
    ("E11.51", "Type 2 diabetes mellitus with diabetic peripheral angiopathy without gangrene", ["Diabetes"], "none"),
    ("E11.65", "Type 2 diabetes mellitus with hyperglycemia", ["Diabetes"], "none"),
    ("E11.9", "Type 2 diabetes mellitus without complications", ["Diabetes"], "none"),
    ("E11.21", "Type 2 diabetes mellitus with diabetic nephropathy", ["Diabetes", "Renal complications"], "none"),
    ("E11.22", "Type 2 diabetes mellitus with diabetic chronic kidney disease", ["Diabetes", "Renal complications"], "none"),
    # Renal complications
    ("N17.9", "Acute kidney failure, unspecified", ["Renal complications"], "none"),
    ("N18.30", "Chronic kidney disease, stage 3 unspecified", ["Renal complications"], "none"),
    ("N18.4", "Chronic kidney disease, stage 4 (severe)", ["Renal complications"], "none"),
    ("N18.5", "Chronic kidney disease, stage 5", ["Renal complications"], "none"),
    ("N18.6", "End stage renal disease", ["Renal complications"], "none"),
    ("N18.9", "Chronic kidney disease, unspecified", ["Renal complications"], "none"),
    ("N19", "Unspecified kidney failure", ["Renal complications"], "none"),
    ("N04.9", "Nephrotic syndrome with unspecified morphologic changes", ["Renal complications"], "none"),
    ("N25.81", "Secondary hyperparathyroidism of renal origin", ["Renal complications"], "none"),
    ("I12.9", "Hypertensive chronic kidney disease with stage 1 through stage 4 chronic kidney disease, or unspecified chronic kidney disease", ["Renal complications"], "none"),
    # Coronary artery disease
    ("I20.9", "Angina pectoris, unspecified", ["Coronary artery disease"], "none"),
    ("I21.3", "ST elevation (STEMI) myocardial infarction of unspecified site", ["Coronary artery disease"], "none"),
    ("I21.4", "Non-ST elevation (NSTEMI) myocardial infarction", ["Coronary artery disease"], "none"),
    ("I24.9", "Acute ischemic heart disease, unspecified", ["Coronary artery disease"], "none"),
    ("I25.10", "Atherosclerotic heart disease of native coronary artery without angina pectoris", ["Coronary artery disease"], "none"),
    ("I25.110", "Atherosclerotic heart disease of native coronary artery with unstable angina pectoris", ["Coronary artery disease"], "none"),
    ("I25.2", "Old myocardial infarction", ["Coronary artery disease"], "none"),
    ("I25.5", "Ischemic cardiomyopathy", ["Coronary artery disease"], "none"),
    # Other
    ("A09", "Infectious gastroenteritis and colitis, unspecified", ["Other"], "none"),
    ("A41.9", "Sepsis, unspecified organism", ["Other"], "none"),
    ("B20", "Human immunodeficiency virus [HIV] disease", ["Other"], "none"),
    ("D64.9", "Anemia, unspecified", ["Other"], "none"),
    ("E03.9", "Hypothyroidism, unspecified", ["Other"], "none"),
    ("E86.0", "Dehydration", ["Other"], "none"),
    ("E87.1", "Hypo-osmolality and hyponatremia", ["Other"], "none"),
    ("F10.20", "Alcohol dependence, uncomplicated", ["Other"], "none"),
    ("F32.9", "Major depressive disorder, single episode, unspecified", ["Other"], "none"),
    ("F41.1", "Generalized anxiety disorder", ["Other"], "none"),
    ("G35", "Multiple sclerosis", ["Other"], "none"),
    ("G40.909", "Epilepsy, unspecified, not intractable, without status epilepticus", ["Other"], "none"),
    ("G43.909", "Migraine, unspecified, not intractable, without status migrainosus", ["Other"], "none"),
    ("H66.90", "Otitis media, unspecified, unspecified ear", ["Other"], "none"),
    ("I10", "Essential (primary) hypertension", ["Other"], "none"),
    ("I26.99", "Other pulmonary embolism without acute cor pulmonale", ["Other"], "none"),
    ("I48.91", "Unspecified atrial fibrillation", ["Other"], "none"),
    ("I50.9", "Heart failure, unspecified", ["Other"], "none"),
    ("I63.9", "Cerebral infarction, unspecified", ["Other"], "none"),
    ("I82.409", "Acute embolism and thrombosis of unspecified deep veins of unspecified lower extremity", ["Other"], "none"),
    ("J02.9", "Acute pharyngitis, unspecified", ["Other"], "none"),
    ("J18.9", "Pneumonia, unspecified organism", ["Other"], "none"),
    ("J44.1", "Chronic obstructive pulmonary disease with (acute) exacerbation", ["Other"], "none"),
    ("J45.909", "Unspecified asthma, uncomplicated", ["Other"], "none"),
    ("K21.9", "Gastro-esophageal reflux disease without esophagitis", ["Other"], "none"),
    ("K29.70", "Gastritis, unspecified, without bleeding", ["Other"], "none"),
    ("K35.80", "Unspecified acute appendicitis", ["Other"], "none"),
    ("K57.30", "Diverticulosis of large intestine without perforation or abscess without bleeding", ["Other"], "none"),
    ("K70.30", "Alcoholic cirrhosis of liver without ascites", ["Other"], "none"),
    ("K76.0", "Fatty (change of) liver, not elsewhere classified", ["Other"], "none"),
    ("K80.20", "Calculus of gallbladder without cholecystitis without obstruction", ["Other"], "none"),
    ("K85.90", "Acute pancreatitis without necrosis or infection, unspecified", ["Other"], "none"),
    ("K92.2", "Gastrointestinal hemorrhage, unspecified", ["Other"], "none"),
    ("L03.90", "Cellulitis, unspecified", ["Other"], "none"),
    ("M17.11", "Unilateral primary osteoarthritis, right knee", ["Other"], "none"),
    ("M54.50", "Low back pain, unspecified", ["Other"], "none"),
    ("M81.0", "Age-related osteoporosis without current pathological fracture", ["Other"], "none"),
    ("N39.0", "Urinary tract infection, site not specified", ["Other"], "none"),
    ("R06.02", "Shortness of breath", ["Other"], "none"),
    ("R07.9", "Chest pain, unspecified", ["Other"], "none"),
    ("R10.9", "Unspecified abdominal pain", ["Other"], "none"),
    ("R19.7", "Diarrhea, unspecified", ["Other"], "none"),
    ("R50.9", "Fever, unspecified", ["Other"], "none"),
    ("R51.9", "Headache, unspecified", ["Other"], "none"),
    ("R55", "Syncope and collapse", ["Other"], "none"),
    ("S06.0X0A", "Concussion without loss of consciousness, initial encounter", ["Other"], "none"),
    ("S72.001A", "Fracture of unspecified part of neck of right femur, initial encounter for closed fracture", ["Other"], "none"),
    ("T78.40XA", "Allergy, unspecified, initial encounter", ["Other"], "none"),
    ("N40.0", "Benign prostatic hyperplasia without lower urinary tract symptoms", ["Other"], "male_only"),
    ("N52.9", "Male erectile dysfunction, unspecified", ["Other"], "male_only"),
    ("N83.20", "Unspecified ovarian cysts", ["Other"], "female_only"),
    ("N92.0", "Excessive and frequent menstruation with regular cycle", ["Other"], "female_only"),
    ("O80", "Encounter for full-term uncomplicated delivery", ["Other"], "female_only"),
]


def discretised_normal(mu, sigma):
    w = [math.exp(-0.5 * ((k - mu) / sigma) ** 2) for k in range(1, 11)]
    s = sum(w)
    return [x / s for x in w]


def moments(probs):
    mean = sum(p * k for p, k in zip(probs, range(1, 11)))
    var = sum(p * (k - mean) ** 2 for p, k in zip(probs, range(1, 11)))
    return mean, math.sqrt(var)


def solve_admissions():
    best = None
    # coarse grid, then local refinement
    for i in range(0, 401):
        mu = 1.0 + i * 0.01
        for j in range(1, 401):
            sigma = 0.5 + j * 0.01
            m, s = moments(discretised_normal(mu, sigma))
            err = (m - TARGET_MEAN) ** 2 + (s - TARGET_SD) ** 2
            if best is None or err < best[0]:
                best = (err, mu, sigma)
    _, mu, sigma = best
    step = 0.005
    while step > 1e-7:
        improved = False
        for dm, ds in ((step, 0), (-step, 0), (0, step), (0, -step)):
            m, s = moments(discretised_normal(mu + dm, sigma + ds))
            err = (m - TARGET_MEAN) ** 2 + (s - TARGET_SD) ** 2
            if err < best[0]:
                best = (err, mu + dm, sigma + ds)
                mu, sigma = mu + dm, sigma + ds
                improved = True
        if not improved:
            step /= 2
    probs = discretised_normal(mu, sigma)
    pct = [round(p * 100, 2) for p in probs]
    drift = round(100 - sum(pct), 2)
    pct[pct.index(max(pct))] = round(pct[pct.index(max(pct))] + drift, 2)
    return pct


def prevalence(p, dist_pct):
    total = sum(dist_pct)
    return 1.0 - sum(w / total * (1 - p) ** m for w, m in zip(dist_pct, range(1, 11)))


def solve_p(target, dist_pct):
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if prevalence(mid, dist_pct) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def complaint_rows(dist_pct):
    usable = [c for c in CODES if c[3] == "none"]
    mass = {cat: solve_p(t, dist_pct) * 100 for cat, t in PREVALENCE_TARGETS.items()}
    weights = {}
    for code, _, cats, _ in usable:
        if len(cats) > 1:
            weights[code] = SHARED_WEIGHT
            for c in cats:
                mass[c] -= SHARED_WEIGHT
    for cat in PREVALENCE_TARGETS:
        solo = [c for c in usable if c[2] == [cat]]
        for code, *_ in solo:
            weights[code] = mass[cat] / len(solo)
    other = [c for c in usable if c[2] == ["Other"]]
    rest = 100 - sum(weights.values())
    for code, *_ in other:
        weights[code] = rest / len(other)
    rows = []
    for code, desc, cats, sex in CODES:
        # restricted codes keep a nominal weight; generation never draws them
        w = round(weights.get(code, 1.0), 6)
        rows.append((code, desc, w, ";".join(cats), sex))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--write", help="config directory to update")
    args = ap.parse_args()

    dist = solve_admissions()
    mean, sd = moments([p / 100 for p in dist])
    line = ",".join(f"{k}:{w:.2f}" for k, w in zip(range(1, 11), dist))
    print(f"admission_count_dist={line}")
    print(f"# mean {mean:.4f} sd {sd:.4f}", file=sys.stderr)

    rows = complaint_rows(dist)
    for cat, target in PREVALENCE_TARGETS.items():
        usable_total = sum(r[2] for r in rows if r[4] == "none")
        p = sum(r[2] for r in rows if r[4] == "none" and cat in r[3].split(";")) / usable_total
        print(f"# {cat}: p={p:.5f} prevalence={prevalence(p, dist):.4f} target={target}", file=sys.stderr)

    if args.write:
        path = os.path.join(args.write, "complaints.csv")
        with open(path, "w", newline="") as fh:
            fh.write("# Chief-complaint catalog. Weights calibrated by scripts/calibrate.py.\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["code", "description", "weight", "categories", "sex_restricted"])
            w.writerows(rows)
        print(f"wrote {path}", file=sys.stderr)


if __name__ == "__main__":
    main()

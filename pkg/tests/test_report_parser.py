import pytest

from lesionloc.report_parser import (
    AP,
    SI,
    Laterality,
    LocationDescriptor,
    ParsedReport,
    ReportLesion,
    Zone,
    load_lexicon,
    parse_report,
    report_to_json,
    significant_lesions,
)


def D(lat="unspecified", ap="unspecified", si="unspecified", zone="unspecified"):
    return LocationDescriptor(Laterality(lat), AP(ap), SI(si), Zone(zone))


# --- spec'd single-statement examples -------------------------------------------

def test_empty_text_rejected():
    with pytest.raises(ValueError, match="empty"):
        parse_report("")
    with pytest.raises(ValueError, match="empty"):
        parse_report("   \n  ")


def test_no_lesion_markers_gives_empty_list():
    report = parse_report("No suspicious lesions. PI-RADS 1 overall.")
    assert report.lesions == ()


def test_right_mid_posterior_pz():
    report = parse_report("Lesion 1: 12 mm, right mid posterior peripheral zone, PI-RADS 4.")
    assert len(report.lesions) == 1
    les = report.lesions[0]
    assert les.index == 1 and les.pirads == 4
    assert les.locations == (D("right", "posterior", "mid", "pz"),)


def test_bilateral_emits_left_and_right():
    report = parse_report("Lesion 2: bilateral base anterior transition zone, PI-RADS 3.")
    les = report.lesions[0]
    assert les.index == 2 and les.pirads == 3
    assert les.locations == (
        D("left", "anterior", "base", "tz"),
        D("right", "anterior", "base", "tz"),
    )


def test_multi_segment_span_emits_one_descriptor_per_segment():
    report = parse_report("Lesion 1: left posterior, mid to apex, PI-RADS 5.")
    les = report.lesions[0]
    assert les.locations == (
        D("left", "posterior", "mid"),
        D("left", "posterior", "apex"),
    )


def test_bilateral_and_two_segments_product():
    report = parse_report("Lesion 1: bilateral, base and mid gland, PI-RADS 4.")
    assert len(report.lesions[0].locations) == 4
    lats = {d.laterality for d in report.lesions[0].locations}
    sis = {d.si for d in report.lesions[0].locations}
    assert lats == {Laterality.LEFT, Laterality.RIGHT}
    assert sis == {SI.BASE, SI.MID}


# --- markers and score spellings ---------------------------------------------------

@pytest.mark.parametrize(
    "line",
    [
        "Lesion 1: left apex, PI-RADS 4.",
        "Finding 1: left apex, PIRADS: 4.",
        "lesion #1 left apex PI-RADS category 4",
        "Lesion no. 1: left apex, PI-RADS score 4.",
        "LESION NUMBER 1: LEFT APEX, PI RADS 4.",
    ],
)
def test_marker_and_score_spellings(line):
    report = parse_report(line)
    assert len(report.lesions) == 1
    les = report.lesions[0]
    assert (les.index, les.pirads) == (1, 4)
    assert les.locations == (D("left", si="apex"),)


def test_case_insensitive():
    a = parse_report("Lesion 1: LEFT APEX, PI-RADS 4.")
    b = parse_report("lesion 1: left apex, pi-rads 4.")
    assert a.lesions[0].locations == b.lesions[0].locations


def test_hyphenated_terms_split():
    report = parse_report("Lesion 1: right mid-gland posterior, PI-RADS 3.")
    assert report.lesions[0].locations == (D("right", "posterior", "mid"),)


def test_midline_not_confused_with_mid():
    report = parse_report("Lesion 1: midline anterior, PI-RADS 4.")
    les = report.lesions[0]
    assert les.locations == (D("midline", "anterior"),)


def test_zone_synonyms():
    for text, zone in [
        ("peripheral zone", "pz"), ("PZ", "pz"),
        ("transition zone", "tz"), ("transitional zone", "tz"),
        ("central zone", "cz"),
        ("anterior fibromuscular stroma", "afs"), ("AFMS", "afs"),
    ]:
        report = parse_report(f"Lesion 1: left apex {text}, PI-RADS 4.")
        assert report.lesions[0].locations[0].zone is Zone(zone), text


def test_two_statements_on_one_line():
    report = parse_report("Lesion 1: left apex PI-RADS 4. Lesion 2: right base PI-RADS 3.")
    assert [l.index for l in report.lesions] == [1, 2]
    assert report.lesions[0].locations == (D("left", si="apex"),)
    assert report.lesions[1].locations == (D("right", si="base"),)
    assert "Lesion 2" not in report.lesions[0].raw_span


# --- warnings ------------------------------------------------------------------------

def test_missing_score_skipped_with_warning():
    text = "Prostate MRI.\nLesion 1: left apex lesion, no score given.\nLesion 2: right base, PI-RADS 4."
    report = parse_report(text)
    assert [l.index for l in report.lesions] == [2]
    assert len(report.warnings) == 1
    line, reason = report.warnings[0]
    assert line == 2
    assert "no PI-RADS score" in reason


def test_score_above_5_skipped_with_warning():
    report = parse_report("Lesion 1: left apex, PI-RADS 7.")
    assert report.lesions == ()
    assert "outside" in report.warnings[0][1]


def test_non_increasing_index_skipped():
    text = "Lesion 2: left apex, PI-RADS 4.\nLesion 1: right base, PI-RADS 3."
    report = parse_report(text)
    assert [l.index for l in report.lesions] == [2]
    assert "not increasing" in report.warnings[0][1]


def test_no_location_terms_flagged_but_kept():
    report = parse_report("Lesion 1: enhancing focus measuring 9 mm, PI-RADS 4.")
    les = report.lesions[0]
    assert les.locations == (D(),)
    assert les.locations[0].is_fully_unspecified()
    assert any("no recognizable location" in r for _, r in report.warnings)


# --- invariance and determinism -------------------------------------------------------

FILLERS = [
    "Clinical history: rising PSA.",
    "Technique: multiparametric MRI of the prostate without endorectal coil.",
    "The prostate measures 4.1 x 3.8 x 4.4 cm.",
    "No extracapsular extension is identified.",
]


def test_filler_lines_do_not_change_lesions():
    core = ["Lesion 1: right anterior mid gland, PI-RADS 4.",
            "Lesion 2: left posterior apex, PI-RADS 5."]
    base = parse_report("\n".join(core))
    for k in range(len(FILLERS) + 1):
        text = "\n".join(FILLERS[:k] + [core[0]] + FILLERS[k:] + [core[1]])
        assert parse_report(text).lesions == base.lesions


def test_parse_is_deterministic():
    text = "Lesion 1: bilateral mid to apex posterior PZ, PI-RADS 4."
    assert parse_report(text) == parse_report(text)
    assert report_to_json(parse_report(text)) == report_to_json(parse_report(text))


def test_descriptor_axes_are_enums():
    report = parse_report("Lesion 1: left apex anterior PZ, PI-RADS 4.")
    d = report.lesions[0].locations[0]
    assert isinstance(d.laterality, Laterality)
    assert isinstance(d.ap, AP)
    assert isinstance(d.si, SI)
    assert isinstance(d.zone, Zone)


def test_json_rendering_shape():
    out = report_to_json(parse_report("Lesion 1: left apex, PI-RADS 4."))
    assert out.endswith("\n")
    import json

    doc = json.loads(out)
    assert doc["lesions"][0]["pirads"] == 4
    assert doc["lesions"][0]["locations"][0]["laterality"] == "left"
    assert doc["warnings"] == []


# --- significant_lesions ----------------------------------------------------------------

def _report_with_scores(scores):
    lesions = tuple(
        ReportLesion(index=i + 1, pirads=s, locations=(D(),), raw_span=f"lesion {i+1}")
        for i, s in enumerate(scores)
    )
    return ParsedReport(lesions=lesions)


def test_significant_filter_keeps_3_and_up():
    report = _report_with_scores([2, 3, 5])
    kept = significant_lesions(report, 3)
    assert [l.pirads for l in kept] == [3, 5]


def test_significant_empty_report():
    assert significant_lesions(_report_with_scores([]), 3) == []


def test_significant_min5_on_4s():
    assert significant_lesions(_report_with_scores([4, 4]), 5) == []


def test_significant_min1_returns_all():
    report = _report_with_scores([1, 2, 3, 4, 5])
    assert significant_lesions(report, 1) == list(report.lesions)


def test_significant_monotone_in_threshold():
    report = _report_with_scores([1, 3, 3, 4, 5, 2])
    counts = [len(significant_lesions(report, m)) for m in range(1, 6)]
    assert counts == sorted(counts, reverse=True)


def test_significant_rejects_bad_min():
    with pytest.raises(ValueError):
        significant_lesions(_report_with_scores([3]), 0)
    with pytest.raises(ValueError):
        significant_lesions(_report_with_scores([3]), 6)


# --- lesion/report construction guards ----------------------------------------------------

def test_report_lesion_validation():
    with pytest.raises(ValueError):
        ReportLesion(index=1, pirads=0, locations=(D(),), raw_span="x")
    with pytest.raises(ValueError):
        ReportLesion(index=0, pirads=3, locations=(D(),), raw_span="x")
    with pytest.raises(ValueError):
        ReportLesion(index=1, pirads=3, locations=(), raw_span="x")


# --- lexicon files ---------------------------------------------------------------------------

def test_custom_lexicon(tmp_path):
    lex_file = tmp_path / "lex.txt"
    lex_file.write_text(
        "# comment\n"
        "\n"
        "sinister -> laterality=left\n"
        "summit -> si=apex\n",
        encoding="utf-8",
    )
    lex = load_lexicon(lex_file)
    report = parse_report("Lesion 1: sinister summit, PI-RADS 4.", lexicon=lex)
    assert report.lesions[0].locations == (D("left", si="apex"),)


def test_lexicon_rejects_unknown_axis(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("word -> flavor=left\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown axis"):
        load_lexicon(f)


def test_lexicon_rejects_unknown_value(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("word -> laterality=up\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown value"):
        load_lexicon(f)


def test_lexicon_rejects_empty(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("# nothing here\n", encoding="utf-8")
    with pytest.raises(ValueError, match="no terms"):
        load_lexicon(f)


def test_lexicon_rejects_missing_arrow(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("left laterality=left\n", encoding="utf-8")
    with pytest.raises(ValueError, match="expected"):
        load_lexicon(f)

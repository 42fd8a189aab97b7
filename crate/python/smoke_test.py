"""Smoke test for the diffex Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python3 python/smoke_test.py
"""

import json
import pathlib
import tempfile

import diffex

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"
IMAGES = ["cat-1", "cat-2", "cat-3", "cat-4"]


def check_corpus():
    corpus = diffex.Corpus.load(str(FIXTURES / "wildcat-toy.corpus.json"))
    assert corpus.domain == "wildcat"
    assert corpus.depth == 2
    assert corpus.root_labels == ["Coat Pattern", "Head", "Tail"]
    assert [label for _, label in corpus.nodes_at_level(2)][:2] == ["Stripes", "Spots"]
    assert corpus.validate() == []

    text = (FIXTURES / "face-sample-response.txt").read_text()
    face, _warnings = diffex.Corpus.from_vlm_response(text, "face")
    assert {"Face", "Skin Texture", "Eyes Color"} <= set(face.root_labels)
    assert face.children("Eyes Color") == ["blue colored eyes", "green colored eyes", "hazel colored eyes"]
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "face.json"
        face.save(str(path))
        assert diffex.Corpus.load(str(path)) == face

    try:
        diffex.Corpus.load(str(FIXTURES / "duplicate-sibling.corpus.json"))
    except ValueError as e:
        assert "sibling" in str(e)
    else:
        raise AssertionError("duplicate siblings should not load")

    prompt = diffex.vlm_prompt("faces", ["eyes", "hair"])
    assert "faces" in prompt and "DOMAIN_NAME" not in prompt


def check_search():
    corpus = diffex.Corpus.load(str(FIXTURES / "wildcat-toy.corpus.json"))
    session = diffex.Session.synthetic(str(FIXTURES / "wildcat-toy.world.json"))
    assert session.labels == ["tiger", "other"]

    report = json.loads(diffex.discover(corpus, session, IMAGES, "tiger", beam_width=2, threshold=0.0, seed=11))
    golden = json.loads((FIXTURES / "wildcat-toy.golden.json").read_text())
    assert [r["paths"] for r in report["rows"]] == [g["members"] for g in golden["beam_b2_threshold0"]]
    assert abs(report["rows"][0]["f_score"] - 0.940625) <= 1e-12

    md = diffex.render_report(json.dumps(report), "markdown")
    assert md.splitlines()[2] == "| wildcat | Stripes | 0.940625 |"
    assert len(json.loads(diffex.top_k(json.dumps(report), 1))["rows"]) == 1

    joint = json.loads(diffex.joint_search(corpus, session, ["Stripes", "Mane", "Spots"], IMAGES, "tiger", beam_width=3))
    assert all(len(r["paths"]) <= 2 for r in joint["rows"])

    server = diffex.serve_synthetic(str(FIXTURES / "wildcat-toy.world.json"))
    try:
        remote = diffex.Session.remote(server.url)
        served = diffex.discover(corpus, remote, IMAGES, "tiger", beam_width=2, threshold=0.0, seed=11)
        local = diffex.discover(corpus, session, IMAGES, "tiger", beam_width=2, threshold=0.0, seed=11)
        assert served == local
    finally:
        server.close()

    try:
        diffex.discover(corpus, session, IMAGES, "lion")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown target class should be rejected")


if __name__ == "__main__":
    check_corpus()
    check_search()
    print("python smoke test passed")

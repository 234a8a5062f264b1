import pytest

import scenes
from recontrack import io as rio
from recontrack import synth
from recontrack.cli import main
from recontrack.synth import SceneScript


@pytest.fixture(scope="module")
def seqdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq") / "occlusion"
    synth.write_bundle(synth.render(scenes.occlusion_scene(gap=8)), d)
    return d


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_track_and_eval(seqdir, tmp_path, capsys):
    assert main(["track", str(seqdir), str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "tracks_box.txt").exists() and (tmp_path / "tracks_mask.txt").exists()
    capsys.readouterr()
    assert main(["eval", str(seqdir / "gt.txt"), str(tmp_path / "tracks_mask.txt")]) == 0
    kv = _kv(capsys.readouterr().out)
    assert kv["ids_star"] == "0" and kv["fp"] == "0"


def test_eval_perfect_output(seqdir, capsys):
    assert main(["eval", str(seqdir / "gt.txt"), str(seqdir / "gt.txt")]) == 0
    kv = _kv(capsys.readouterr().out)
    assert float(kv["mota"]) == 1.0 and float(kv["smotsa"]) == 1.0
    assert main(["eval", str(seqdir / "gt_boxes.txt"), str(seqdir / "gt_boxes.txt"), "--mode", "box"]) == 0
    assert float(_kv(capsys.readouterr().out)["mota"]) == 1.0


def test_2d_only_stage_flag(seqdir, tmp_path, capsys):
    assert main(["track", str(seqdir), str(tmp_path), "--stage", "2d-only", "--quiet"]) == 0
    capsys.readouterr()
    main(["eval", str(seqdir / "gt.txt"), str(tmp_path / "tracks_mask.txt")])
    assert _kv(capsys.readouterr().out)["ids_star"] == "1"


def test_track_twice_byte_identical(seqdir, tmp_path):
    for name in ("a", "b"):
        assert main(["track", str(seqdir), str(tmp_path / name), "--quiet", "--threads", "2"]) == 0
    for f in ("tracks_box.txt", "tracks_mask.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_online_flag(seqdir, tmp_path):
    assert main(["track", str(seqdir), str(tmp_path), "--online", "--quiet"]) == 0
    assert rio.read_box_records(tmp_path / "tracks_box.txt")


def test_timing_report_on_stderr(seqdir, tmp_path, capsys):
    assert main(["track", str(seqdir), str(tmp_path)]) == 0
    assert "fusion" in capsys.readouterr().err


def test_dump_traj_line_count(seqdir, tmp_path):
    out = tmp_path / "traj.txt"
    assert main(["track", str(seqdir), str(tmp_path), "--quiet"]) == 0
    assert main(["dump-traj", str(seqdir), str(out), "--quiet"]) == 0
    recs = rio.read_box_records(tmp_path / "tracks_box.txt")
    lines = out.read_text().splitlines()
    assert len(lines) == len(recs)
    f, tid, x, y, z = lines[0].split()
    assert float(z) > 0


def test_dump_recon(seqdir, tmp_path):
    assert main(["dump-recon", str(seqdir), str(tmp_path), "--quiet"]) == 0
    assert sorted(p.name for p in tmp_path.glob("transforms_*.txt")) == ["transforms_0000.txt", "transforms_0001.txt"]
    assert (tmp_path / "recon_0000.txt").read_text().count("\n") > 100


def test_synth_subcommand(tmp_path):
    assert main(["synth", str(tmp_path / "s"), "--seed", "2"]) == 0
    assert (tmp_path / "s" / "calib.txt").exists()
    script = tmp_path / "scene.txt"
    script.write_text(synth.format_script(scenes.lateral_car(n=3)))
    assert main(["synth", str(tmp_path / "t"), "--script", str(script)]) == 0
    assert len(list((tmp_path / "t" / "depth").iterdir())) == 3


def test_convert_rle_round_trip(seqdir, tmp_path):
    gt = rio.read_mask_records(seqdir / "gt.txt")
    coco = tmp_path / "gt_coco.txt"
    assert main(["convert-rle", str(seqdir / "gt.txt"), str(coco), "--to", "coco"]) == 0
    assert main(["convert-rle", str(coco), str(tmp_path / "plain.txt"), "--to", "plain"]) == 0
    back = rio.read_mask_records(tmp_path / "plain.txt")
    assert [(r.frame, r.track_id, r.mask) for r in back] == [(r.frame, r.track_id, r.mask) for r in gt]


def test_empty_sequence_exit_ok(tmp_path):
    d = tmp_path / "empty"
    synth.write_bundle(synth.render(SceneScript(n_frames=3)), d)
    assert main(["track", str(d), str(tmp_path / "out"), "--quiet"]) == 0
    assert (tmp_path / "out" / "tracks_box.txt").read_text() == ""


def test_missing_input_exit_1(tmp_path, capsys):
    assert main(["track", str(tmp_path / "nothing"), str(tmp_path / "out"), "--quiet"]) == 1
    assert "input error" in capsys.readouterr().err


def test_malformed_input_names_offset(seqdir, tmp_path, capsys):
    import shutil

    d = tmp_path / "bad"
    shutil.copytree(seqdir, d)
    text = (d / "detections.txt").read_text().splitlines()
    text[2] = "3 car oops 1 2 3 4"
    (d / "detections.txt").write_text("\n".join(text) + "\n")
    assert main(["track", str(d), str(tmp_path / "out"), "--quiet"]) == 1
    err = capsys.readouterr().err
    assert "detections.txt" in err and "byte" in err


def test_config_error_exit_2(seqdir, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("merge_score = -3\n")
    assert main(["track", str(seqdir), str(tmp_path), "--config", str(cfg), "--quiet"]) == 2
    assert main(["track", str(seqdir), str(tmp_path), "--max-gap", "-2", "--quiet"]) == 2


def test_config_file_applied(seqdir, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_gap = 0\nstage = no-fill\n")
    assert main(["track", str(seqdir), str(tmp_path), "--config", str(cfg), "--quiet"]) == 0
    assert len({r.track_id for r in rio.read_box_records(tmp_path / "tracks_box.txt")}) == 2


def test_unknown_flag_is_usage_error(seqdir, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["track", str(seqdir), str(tmp_path), "--frobnicate"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err

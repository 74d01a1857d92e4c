import os

from .fs import DEFAULT_OUTPUT, OUTPUT_ENV, ensure_dir, output_root, source_revision


def test_output_root_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_root(str(tmp_path / "flag")) == str(tmp_path / "flag")
    assert output_root() == str(tmp_path / "env")
    monkeypatch.delenv(OUTPUT_ENV)
    monkeypatch.chdir(tmp_path)
    assert output_root() == os.path.join(str(tmp_path), DEFAULT_OUTPUT)


def test_ensure_dir_is_idempotent(tmp_path):
    path = str(tmp_path / "a" / "b")
    assert ensure_dir(path) == path
    assert ensure_dir(path) == path
    assert os.path.isdir(path)


def test_no_revision_outside_git(tmp_path):
    assert source_revision(str(tmp_path)) is None

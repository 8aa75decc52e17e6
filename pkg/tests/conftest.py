from __future__ import annotations

import asyncio
import contextlib
import functools
import threading

import pytest

from memsieve.evasion import build_dump, preset
from memsieve.service import ScanServer

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, ok: bool, detail: str = "") -> None:
    """Remember one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[number] = (name, ok, detail)
    print(f"[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d}. {'PASS' if ok else 'FAIL'}  {name}  {detail}")


@functools.lru_cache(maxsize=8)
def preset_dump(name: str, seed: int = 0, size: int = 16 << 20):
    """(dump, manifest, truths) for a preset; cached across tests."""
    return build_dump(preset(name, seed, size))


@contextlib.contextmanager
def running_server(**kw):
    """A ScanServer on an ephemeral port, driven by its own loop thread."""
    ready = threading.Event()
    box: dict = {}

    async def main():
        server = ScanServer("127.0.0.1:0", **kw)
        box["port"] = await server.start()
        box["loop"] = asyncio.get_running_loop()
        box["stop"] = asyncio.Event()
        box["server"] = server
        ready.set()
        await box["stop"].wait()
        await server.stop()

    thread = threading.Thread(target=lambda: asyncio.run(main()), daemon=True)
    thread.start()
    if not ready.wait(10):
        raise RuntimeError("server did not start")
    try:
        yield f"127.0.0.1:{box['port']}", box["server"]
    finally:
        box["loop"].call_soon_threadsafe(box["stop"].set)
        thread.join(60)


@pytest.fixture
def server():
    with running_server(max_concurrent=4) as handle:
        yield handle

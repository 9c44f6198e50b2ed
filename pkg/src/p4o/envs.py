"""Built-in pixel environments, standard wrappers, and the subprocess bridge.

All built-in environments are pure state machines: (seed, action sequence)
fully determines every transition, observations are uint8 images shaped
(C, H, W), and internal state round-trips through get_state()/set_state()
for exact checkpoint resume.

Subprocess protocol (newline-delimited JSON over stdin/stdout):

    child -> parent, once at startup:
        {"protocol": 1, "action_count": A, "obs_shape": [C, H, W]}
    parent -> child:
        {"cmd": "reset", "seed": <u64>}   or   {"cmd": "step", "action": <u32>}
        {"cmd": "close"}
    child -> parent, reply to reset/step:
        {"obs": <base64 of raw C*H*W bytes>, "shape": [C, H, W],
         "reward": <f64>, "done": <bool>}

Malformed messages, timeouts, or child exit raise EnvProtocolError with the
captured stderr tail.
"""

from __future__ import annotations

import base64
import json
import selectors
import shlex
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EnvProtocolError
from .rng import Rng


@dataclass
class EnvStep:
    observation: np.ndarray  # uint8, (C, H, W)
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


class Env:
    """Base interface; concrete envs define action_count and obs_shape."""

    action_count: int
    obs_shape: tuple[int, int, int]

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int) -> EnvStep:
        raise NotImplementedError

    def get_state(self) -> dict:
        raise NotImplementedError

    def set_state(self, state: dict) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_action(self, action: int) -> None:
        if not 0 <= int(action) < self.action_count:
            raise ValueError(f"action {action} outside [0, {self.action_count})")


class PixelCatch(Env):
    """Catch falling pellets with a paddle.

    A 16x16 single-channel image shows a 3-pixel paddle on the bottom row and
    one falling pellet. Actions: 0 = left, 1 = stay, 2 = right. Each step the
    paddle moves, then the pellet falls one row; when it reaches the paddle
    row the episode scores +1 if the paddle covers it and -1 otherwise. After
    `drops_per_episode` resolved drops the episode ends. The pellet spawn
    column is the only randomness.
    """

    action_count = 3

    def __init__(self, grid: int = 16, paddle_width: int = 3, drops_per_episode: int = 1,
                 pellet_speed: int = 1):
        if grid < 4 or not 1 <= paddle_width < grid or pellet_speed < 1:
            raise ConfigError(f"bad PixelCatch geometry: grid={grid}, paddle={paddle_width}")
        self.grid = grid
        self.paddle_width = paddle_width
        self.drops_per_episode = drops_per_episode
        self.pellet_speed = pellet_speed
        self.obs_shape = (1, grid, grid)
        self._rng: Rng | None = None
        self._needs_reset = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = Rng(seed, "pixelcatch")
        if self._rng is None:
            raise ConfigError("PixelCatch.reset needs a seed on first call")
        self.paddle_x = (self.grid - self.paddle_width) // 2
        self._spawn()
        self.drops_done = 0
        self.steps = 0
        self._needs_reset = False
        return self._render()

    def _spawn(self) -> None:
        self.pellet_col = int(self._rng.integers(0, self.grid))
        self.pellet_row = 0

    def step(self, action: int) -> EnvStep:
        if self._needs_reset:
            raise EnvProtocolError("PixelCatch stepped after terminal without reset")
        self._check_action(action)
        self.paddle_x = int(np.clip(self.paddle_x + (int(action) - 1), 0,
                                    self.grid - self.paddle_width))
        self.pellet_row += self.pellet_speed
        reward = 0.0
        terminal = False
        if self.pellet_row >= self.grid - 1:
            caught = self.paddle_x <= self.pellet_col < self.paddle_x + self.paddle_width
            reward = 1.0 if caught else -1.0
            self.drops_done += 1
            if self.drops_done >= self.drops_per_episode:
                terminal = True
                self._needs_reset = True
            else:
                self._spawn()
        self.steps += 1
        return EnvStep(self._render(), reward, terminal, {"steps": self.steps})

    def _render(self) -> np.ndarray:
        img = np.zeros(self.obs_shape, dtype=np.uint8)
        img[0, self.grid - 1, self.paddle_x:self.paddle_x + self.paddle_width] = 255
        if self.pellet_row < self.grid - 1:
            img[0, self.pellet_row, self.pellet_col] = 255
        return img

    def get_state(self) -> dict:
        return {"paddle_x": self.paddle_x, "pellet_col": self.pellet_col,
                "pellet_row": self.pellet_row, "drops_done": self.drops_done,
                "steps": self.steps, "needs_reset": self._needs_reset,
                "rng": self._rng.get_state()}

    def set_state(self, state: dict) -> None:
        self.paddle_x = state["paddle_x"]
        self.pellet_col = state["pellet_col"]
        self.pellet_row = state["pellet_row"]
        self.drops_done = state["drops_done"]
        self.steps = state["steps"]
        self._needs_reset = state["needs_reset"]
        self._rng = Rng(0)
        self._rng.set_state(state["rng"])


class TMaze(Env):
    """Memory probe: a cue shown only on the first frame decides which arm
    pays at the end of a corridor.

    The agent rides a rail of length `corridor`: every action advances one
    cell. At the junction, action 0 (left) or 2 (right) chooses an arm and
    scores +1 if it matches the cue and -1 otherwise; action 1 declines to
    choose and scores 0, so chance level is exactly zero both for a uniform
    policy and for the best cue-blind deterministic policy. One more outcome
    frame follows (revealing the chosen arm and whether it was correct),
    then the episode ends.

    Two elements tie the task to the predictive mechanism rather than to
    reactive perception. First, every episode draws a random `wallpaper`
    band that cyclically drifts one column per step in the cue's direction
    for the first `drift_steps` steps, then freezes. Predicting the next
    frame therefore requires encoding and carrying the drift direction,
    which IS the cue; a shifted uniform-random pattern is still uniform, so
    a frozen wallpaper leaks nothing, and the junction's 4-frame stacked
    window only ever contains frozen frames. Second, the outcome frame is a
    function of (cue, chosen arm), so it too is predictable only for a model
    that still knows the cue. Reward alone says nothing about the wallpaper;
    only the prediction objective makes it worth representing.
    """

    action_count = 3

    def __init__(self, corridor: int = 5, side: int = 16, drift_steps: int | None = None):
        if corridor < 1 or side < 16:
            raise ConfigError(f"bad TMaze geometry: corridor={corridor}, side={side}")
        if drift_steps is None:
            drift_steps = max(corridor - 3, 0)
        if not 0 <= drift_steps <= max(corridor - 3, 0):
            # the junction's stacked window spans the last 4 frames; the
            # drift must have frozen before they were rendered
            raise ConfigError(f"drift_steps={drift_steps} would leak the cue into "
                              f"the junction window at corridor={corridor}")
        self.corridor = corridor
        self.side = side
        self.drift_steps = drift_steps
        self.obs_shape = (1, side, side)
        self._rng: Rng | None = None
        self._needs_reset = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = Rng(seed, "tmaze")
        if self._rng is None:
            raise ConfigError("TMaze.reset needs a seed on first call")
        self.pos = 0
        self.cue = int(self._rng.integers(0, 2))  # 0 = left arm pays, 1 = right
        self.wallpaper = (self._rng.uniform(size=self.side) < 0.5)
        self.chosen = -1
        self.correct = False
        self._needs_reset = False
        return self._render()

    def step(self, action: int) -> EnvStep:
        if self._needs_reset:
            raise EnvProtocolError("TMaze stepped after terminal without reset")
        self._check_action(action)
        reward = 0.0
        terminal = False
        if self.pos < self.corridor:
            self.pos += 1
        elif self.pos == self.corridor:
            # junction: resolve the arm choice, then show the outcome frame
            if action == 0:
                self.chosen, self.correct = 0, self.cue == 0
                reward = 1.0 if self.correct else -1.0
            elif action == 2:
                self.chosen, self.correct = 1, self.cue == 1
                reward = 1.0 if self.correct else -1.0
            else:
                self.chosen, self.correct = -1, False
                reward = 0.0
            self.pos += 1
        else:
            terminal = True
            self._needs_reset = True
        return EnvStep(self._render(), reward, terminal, {"cue": self.cue})

    def _render(self) -> np.ndarray:
        img = np.zeros(self.obs_shape, dtype=np.uint8)
        s = self.side
        half = s // 2
        quarter = s // 4
        if self.pos == 0:
            # small dim corner block; deliberately weak so leftover echoes of
            # it in an untrained recurrent state cannot carry the episode
            cols = slice(1, 3) if self.cue == 0 else slice(s - 3, s - 1)
            img[0, 0:2, cols] = 128
        if self.pos <= self.corridor:
            col = round(self.pos * (s - 1) / (self.corridor + 1))
            img[0, 6:9, col] = 255
        # wallpaper band, cyclically shifted in the cue direction while the
        # drift lasts (direction +1 = right arm pays)
        direction = 1 if self.cue == 1 else -1
        offset = min(self.pos, self.drift_steps) * direction
        shifted = np.roll(self.wallpaper, offset)
        img[0, 10:12, shifted] = 255
        if self.pos == self.corridor:
            img[0, s - 4:s, :] = 255  # junction bar
        if self.pos > self.corridor:
            if self.chosen == 0:
                img[0, s - 4:s, 0:half] = 255
            elif self.chosen == 1:
                img[0, s - 4:s, half:s] = 255
            if self.correct:
                img[0, 0:3, :] = 255
        return img

    def get_state(self) -> dict:
        return {"pos": self.pos, "cue": self.cue, "chosen": self.chosen,
                "correct": self.correct, "needs_reset": self._needs_reset,
                "wallpaper": [bool(v) for v in self.wallpaper],
                "rng": self._rng.get_state()}

    def set_state(self, state: dict) -> None:
        self.pos = state["pos"]
        self.cue = state["cue"]
        self.chosen = state["chosen"]
        self.correct = state["correct"]
        self.wallpaper = np.asarray(state["wallpaper"], dtype=bool)
        self._needs_reset = state["needs_reset"]
        self._rng = Rng(0)
        self._rng.set_state(state["rng"])


# ---------------------------------------------------------------- wrappers


class Wrapper(Env):
    def __init__(self, env: Env):
        self.env = env
        self.action_count = env.action_count
        self.obs_shape = env.obs_shape

    def close(self) -> None:
        self.env.close()


class StickyActions(Wrapper):
    """With probability p_repeat the previous action is executed instead of
    the requested one. The first step after reset never repeats."""

    def __init__(self, env: Env, p_repeat: float = 0.25):
        if not 0.0 <= p_repeat < 1.0:
            raise ConfigError(f"p_repeat must be in [0, 1), got {p_repeat}")
        if isinstance(env, FrameStack):
            raise ConfigError("canonical wrapper order is frame_stack(sticky(env))")
        super().__init__(env)
        self.p_repeat = p_repeat
        self._prev: int | None = None
        self._rng: Rng | None = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = Rng(seed, "sticky")
        self._prev = None
        return self.env.reset(seed)

    def step(self, action: int) -> EnvStep:
        executed = int(action)
        if (self.p_repeat > 0.0 and self._prev is not None
                and self._rng.uniform() < self.p_repeat):
            executed = self._prev
        out = self.env.step(executed)
        self._prev = executed
        out.info["executed_action"] = executed
        if out.terminal:
            self._prev = None
        return out

    def get_state(self) -> dict:
        return {"prev": self._prev, "rng": None if self._rng is None else self._rng.get_state(),
                "inner": self.env.get_state()}

    def set_state(self, state: dict) -> None:
        self._prev = state["prev"]
        if state["rng"] is not None:
            self._rng = Rng(0)
            self._rng.set_state(state["rng"])
        self.env.set_state(state["inner"])


class FrameStack(Wrapper):
    """Observation becomes the n most recent frames, oldest first; reset
    replicates the initial frame n times."""

    def __init__(self, env: Env, n: int = 4):
        if n < 1:
            raise ConfigError(f"frame stack needs n >= 1, got {n}")
        super().__init__(env)
        self.n = n
        c, h, w = env.obs_shape
        self.obs_shape = (n * c, h, w)
        self._frames: list[np.ndarray] = []

    def reset(self, seed: int | None = None) -> np.ndarray:
        obs = self.env.reset(seed)
        self._frames = [obs] * self.n
        return self._stacked()

    def step(self, action: int) -> EnvStep:
        out = self.env.step(action)
        self._frames = self._frames[1:] + [out.observation]
        out.observation = self._stacked()
        return out

    def _stacked(self) -> np.ndarray:
        return np.concatenate(self._frames, axis=0)

    def get_state(self) -> dict:
        return {"frames": [f.copy() for f in self._frames], "inner": self.env.get_state()}

    def set_state(self, state: dict) -> None:
        self._frames = [np.asarray(f, dtype=np.uint8) for f in state["frames"]]
        self.env.set_state(state["inner"])


def luma_601(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) uint8 RGB -> (1, H, W) uint8 grayscale, ITU-R 601 weights."""
    y = 0.299 * rgb[0].astype(np.float64) + 0.587 * rgb[1] + 0.114 * rgb[2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)[None]


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resampling of a (C, H, W) uint8 image, computed in
    float64 with rational interval overlaps; deterministic and bit-stable."""
    c, h, w = img.shape

    def weights(n_in: int, n_out: int) -> np.ndarray:
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                m[o, i] = max(0.0, min(hi, i + 1) - max(lo, i))
        return m / scale

    wh = weights(h, out_h)
    ww = weights(w, out_w)
    out = np.einsum("oi,cij,pj->cop", wh, img.astype(np.float64), ww)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class GrayscaleResize(Wrapper):
    """Convert RGB sources to grayscale and resize by area averaging."""

    def __init__(self, env: Env, side: int = 84):
        super().__init__(env)
        self.side = side
        c = env.obs_shape[0]
        if c not in (1, 3):
            raise ConfigError(f"GrayscaleResize needs 1- or 3-channel input, got {c}")
        self.obs_shape = (1, side, side)

    def _convert(self, obs: np.ndarray) -> np.ndarray:
        if obs.shape[0] == 3:
            obs = luma_601(obs)
        if obs.shape[1:] != (self.side, self.side):
            obs = area_resize(obs, self.side, self.side)
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        return self._convert(self.env.reset(seed))

    def step(self, action: int) -> EnvStep:
        out = self.env.step(action)
        out.observation = self._convert(out.observation)
        return out

    def get_state(self) -> dict:
        return {"inner": self.env.get_state()}

    def set_state(self, state: dict) -> None:
        self.env.set_state(state["inner"])


# ---------------------------------------------------------- external envs


class ExternalEnv(Env):
    """Environment served by a child process over the line protocol
    documented in the module docstring."""

    def __init__(self, command: str | list[str], timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, bufsize=0)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._proc.stdout, selectors.EVENT_READ)
        self._buf = b""
        hello = self._read_message()
        try:
            self.action_count = int(hello["action_count"])
            self.obs_shape = tuple(int(v) for v in hello["obs_shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise self._fail(f"bad handshake {hello!r}") from exc
        if len(self.obs_shape) != 3 or self.action_count < 1:
            raise self._fail(f"bad handshake values {hello!r}")

    def _fail(self, msg: str) -> EnvProtocolError:
        tail = b""
        try:
            self._proc.kill()
            tail = self._proc.stderr.read() or b""
        except Exception:
            pass
        return EnvProtocolError(f"external env {self.command}: {msg}; "
                                f"stderr tail: {tail[-2000:].decode('utf-8', 'replace')}")

    def _read_message(self) -> dict:
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise self._fail(f"timeout after {self.timeout}s waiting for reply")
            if self._proc.poll() is not None:
                raise self._fail(f"child exited with code {self._proc.returncode}")
            if self._sel.select(timeout=min(remaining, 0.5)):
                chunk = self._proc.stdout.read(65536)
                if not chunk:
                    raise self._fail("child closed stdout")
                self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise self._fail(f"malformed message {line[:200]!r}") from exc
        if not isinstance(msg, dict):
            raise self._fail(f"malformed message {line[:200]!r}")
        return msg

    def _send(self, msg: dict) -> None:
        try:
            self._proc.stdin.write((json.dumps(msg) + "\n").encode("utf-8"))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise self._fail("child pipe closed") from exc

    def _transact(self, msg: dict) -> EnvStep:
        self._send(msg)
        reply = self._read_message()
        try:
            shape = tuple(int(v) for v in reply["shape"])
            raw = base64.b64decode(reply["obs"])
            obs = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
            return EnvStep(obs, float(reply["reward"]), bool(reply["done"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise self._fail(f"malformed reply {reply!r}") from exc

    def reset(self, seed: int | None = None) -> np.ndarray:
        return self._transact({"cmd": "reset", "seed": int(seed or 0)}).observation

    def step(self, action: int) -> EnvStep:
        self._check_action(action)
        return self._transact({"cmd": "step", "action": int(action)})

    def get_state(self) -> dict:
        raise ConfigError("external environments do not support state checkpointing")

    def set_state(self, state: dict) -> None:
        raise ConfigError("external environments do not support state checkpointing")

    def close(self) -> None:
        try:
            self._send({"cmd": "close"})
        except EnvProtocolError:
            pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()


# ------------------------------------------------------------- vector set


class VectorEnv:
    """A fixed set of environments stepped in lockstep. Each instance owns
    its state and random stream; batching never mixes them."""

    def __init__(self, envs: list[Env]):
        if not envs:
            raise ConfigError("VectorEnv needs at least one environment")
        first = envs[0]
        for i, e in enumerate(envs):
            if e.obs_shape != first.obs_shape or e.action_count != first.action_count:
                raise ConfigError(f"env {i} disagrees on shape/action count")
        self.envs = envs
        self.n = len(envs)
        self.obs_shape = first.obs_shape
        self.action_count = first.action_count

    def reset_all(self, seeds: list[int]) -> np.ndarray:
        return np.stack([e.reset(s) for e, s in zip(self.envs, seeds)])

    def reset_one(self, i: int) -> np.ndarray:
        return self.envs[i].reset()

    def step_all(self, actions: np.ndarray) -> list[EnvStep]:
        return [e.step(int(a)) for e, a in zip(self.envs, actions)]

    def get_state(self) -> list[dict]:
        return [e.get_state() for e in self.envs]

    def set_state(self, states: list[dict]) -> None:
        for e, s in zip(self.envs, states):
            e.set_state(s)

    def close(self) -> None:
        for e in self.envs:
            e.close()


def make_env(name: str, *, sticky: float = 0.0, frame_stack: int = 4,
             tmaze_corridor: int = 5, catch_drops: int = 1) -> Env:
    """Build a named environment with the canonical wrapper order
    frame_stack(sticky(base))."""
    if name == "pixelcatch":
        env: Env = PixelCatch(drops_per_episode=catch_drops)
    elif name == "tmaze":
        env = TMaze(corridor=tmaze_corridor)
    elif name.startswith("external:"):
        env = ExternalEnv(name.split(":", 1)[1])
    else:
        raise ConfigError(f"unknown environment {name!r}")
    if sticky > 0.0:
        env = StickyActions(env, sticky)
    if frame_stack > 1:
        env = FrameStack(env, frame_stack)
    return env

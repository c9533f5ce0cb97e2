"""Independent reference implementations used by the unit and acceptance tests."""

from collections import deque
from itertools import product

import numpy as np

from tinyomni.config import TEXT_EOS


def all_strings(alphabet, max_len):
    return ["".join(p) for n in range(max_len + 1) for p in product(alphabet, repeat=n)]


def bfs_edit_distances(alphabet="abc", max_len=4):
    """All-pairs edit distance by breadth-first search over single edits.

    No alignment table: each string is a graph node and every insertion,
    deletion or substitution is an edge. Optimal edit paths never need a
    string longer than the longer endpoint, so the graph is closed at max_len.
    """
    nodes = all_strings(alphabet, max_len)

    def neighbours(s):
        for i in range(len(s) + 1):
            if len(s) < max_len:
                for c in alphabet:
                    yield s[:i] + c + s[i:]
            if i < len(s):
                yield s[:i] + s[i + 1:]
                for c in alphabet:
                    if c != s[i]:
                        yield s[:i] + c + s[i + 1:]

    dist = {}
    for src in nodes:
        seen = {src: 0}
        queue = deque([src])
        while queue:
            s = queue.popleft()
            for t in neighbours(s):
                if t not in seen:
                    seen[t] = seen[s] + 1
                    queue.append(t)
        for dst, d in seen.items():
            dist[src, dst] = d
    return nodes, dist


class _Cache:
    started = False


class _Part:
    def new_cache(self):
        return _Cache()


class PerfectOracleModel:
    """Stands in for a perfectly trained checkpoint on the oracle task.

    Text: a fixed script of content ids then eos. Codes: exactly the oracle
    encoding of the text token that owns each frame under the stagger rule.
    """

    def __init__(self, config, spec, script):
        self.config = config
        self.spec = spec
        self.script = list(script) + [TEXT_EOS]
        self.thinker = self.talker = _Part()
        self.fed: list[int] = []

    def step(self, text_tokens, audio_columns, thinker_cache, talker_cache, modality=None, speakers=None):
        cfg = self.config
        if not thinker_cache.started:
            # prompt prefill of a new session
            thinker_cache.started = True
            self.fed = []
        else:
            self.fed.extend(int(t) for t in np.asarray(text_tokens).reshape(-1))
        s = len(self.fed)
        text = np.zeros((1, cfg.text_vocab))
        text[0, self.script[min(s, len(self.script) - 1)]] = 1.0
        audio = []
        for q in range(cfg.codebook_count):
            logits = np.zeros((1, cfg.audio_vocab))
            f = s - q - cfg.stagger_base
            if 0 <= f < len(self.fed):
                logits[0, self.spec.encode([self.fed[f]])[q, 0]] = 1.0
            audio.append(logits)
        return text, audio

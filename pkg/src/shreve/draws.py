"""Thinned multi-chain draw store with on-disk formats.

Draws live in one dense array per run, ``(chains, draws, parameters)``, with
a parallel name list and a name -> reporting-group map. The disk layout is
one long-format CSV per chain (``iteration,parameter,value``), the pointwise
log-likelihood matrix as one binary ``.npy`` per chain, and a JSON metadata
file; floats are written with shortest round-trip formatting so identical
runs produce byte-identical files.
"""
import csv
import json
import os

import numpy as np

__all__ = ["PosteriorDraws"]


class PosteriorDraws:
    """Container for thinned posterior draws across chains.

    Attributes
    ----------
    names : list of str
        Parameter names, aligned with the last axis of ``chains``.
    groups : dict
        Parameter name -> reporting group.
    chains : ndarray, shape (C, S, P)
    iterations : ndarray, shape (S,)
        Absolute iteration numbers of the retained draws.
    loglik : ndarray, shape (C, S, N) or None
        Pointwise log likelihood, observation columns in data record order.
    meta : dict
        Seeds, sampler plan, acceptance rates, timings.
    """

    def __init__(self, names, groups, chains, iterations, loglik=None, meta=None):
        self.names = list(names)
        self.groups = dict(groups)
        self.chains = np.asarray(chains, dtype=float)
        self.iterations = np.asarray(iterations, dtype=np.int64)
        self.loglik = None if loglik is None else np.asarray(loglik, dtype=float)
        self.meta = dict(meta or {})
        if self.chains.ndim != 3 or self.chains.shape[2] != len(self.names):
            raise ValueError("chains must have shape (n_chains, n_draws, n_params)")
        if self.iterations.shape != (self.chains.shape[1],):
            raise ValueError("iterations must align with the draw axis")
        self._index = {name: i for i, name in enumerate(self.names)}

    @property
    def n_chains(self):
        return self.chains.shape[0]

    @property
    def n_draws(self):
        return self.chains.shape[1]

    @property
    def n_params(self):
        return self.chains.shape[2]

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def get(self, name):
        """Draws of one parameter, shape (n_chains, n_draws)."""
        return self.chains[:, :, self.index(name)]

    def stacked(self, name):
        """Draws of one parameter pooled across chains, shape (C*S,)."""
        return self.get(name).reshape(-1)

    def names_in_group(self, group):
        return [n for n in self.names if self.groups.get(n) == group]

    def loglik_matrix(self):
        """Pointwise log likelihood stacked over chains, shape (C*S, N)."""
        if self.loglik is None:
            raise ValueError("this run did not record the pointwise log likelihood")
        c, s, n = self.loglik.shape
        return self.loglik.reshape(c * s, n)

    # -- disk formats --------------------------------------------------------

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        manifest = {
            "names": self.names,
            "groups": self.groups,
            "iterations": [int(i) for i in self.iterations],
            "n_chains": self.n_chains,
            "has_loglik": self.loglik is not None,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh)
            fh.write("\n")
        with open(os.path.join(out_dir, "run_metadata.json"), "w") as fh:
            json.dump(self.meta, fh, indent=2, default=str)
            fh.write("\n")
        for c in range(self.n_chains):
            path = os.path.join(out_dir, f"chain_{c:02d}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "parameter", "value"])
                for s in range(self.n_draws):
                    it = int(self.iterations[s])
                    row_vals = self.chains[c, s]
                    for p, name in enumerate(self.names):
                        writer.writerow([it, name, repr(float(row_vals[p]))])
            if self.loglik is not None:
                np.save(os.path.join(out_dir, f"loglik_chain_{c:02d}.npy"), self.loglik[c])

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        meta_path = os.path.join(out_dir, "run_metadata.json")
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        names = manifest["names"]
        iterations = np.array(manifest["iterations"], dtype=np.int64)
        n_chains = manifest["n_chains"]
        index = {name: i for i, name in enumerate(names)}
        chains = np.empty((n_chains, len(iterations), len(names)))
        it_pos = {int(it): s for s, it in enumerate(iterations)}
        for c in range(n_chains):
            path = os.path.join(out_dir, f"chain_{c:02d}.csv")
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for row in reader:
                    chains[c, it_pos[int(row[0])], index[row[1]]] = float(row[2])
        loglik = None
        if manifest.get("has_loglik"):
            loglik = np.stack(
                [
                    np.load(os.path.join(out_dir, f"loglik_chain_{c:02d}.npy"))
                    for c in range(n_chains)
                ]
            )
        return cls(names, manifest["groups"], chains, iterations, loglik, meta)

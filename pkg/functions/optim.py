"""
Ottimizzatori a discesa del gradiente: SGD, Adam, ADADELTA.

Lo stato (slot) vive dentro l'ottimizzatore ed e' salvato nel checkpoint.
"""

import numpy as np

# Iperparametri di default per tipo di ottimizzatore
HYPER_DEFAULTS = {
    'sgd': {'lr': 0.01},
    'adam': {'lr': 0.001, 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8},
    'adadelta': {'lr': 1.0, 'rho': 0.95, 'eps': 1e-6},
}

SLOT_NAMES = {
    'sgd': (),
    'adam': ('m', 'v'),
    'adadelta': ('acc_grad', 'acc_delta'),
}


class Optimizer:
    """
    Ottimizzatore con stato per parametro.

    Args:
        kind: 'sgd' | 'adam' | 'adadelta'
        **hyper: iperparametri che sovrascrivono HYPER_DEFAULTS
    """

    def __init__(self, kind, **hyper):
        if kind not in HYPER_DEFAULTS:
            raise ValueError(f"ottimizzatore sconosciuto: {kind!r}")
        self.kind = kind
        self.hyper = dict(HYPER_DEFAULTS[kind])
        unknown = set(hyper) - set(self.hyper)
        if unknown:
            raise ValueError(f"iperparametri non validi per {kind}: {sorted(unknown)}")
        self.hyper.update({k: float(v) for k, v in hyper.items()})
        self.t = 0
        self.slots = {name: {} for name in SLOT_NAMES[kind]}

    def step(self, params, names=None):
        """
        Aggiorna i parametri indicati con i gradienti correnti, poi li azzera.

        I parametri non indicati (congelati) vengono solo azzerati.
        """
        names = list(params) if names is None else list(names)
        missing = [n for n in names if params[n].grad is None]
        if missing:
            raise ValueError(f"gradienti mancanti per: {missing}")

        self.t += 1
        for name in names:
            tensor = params[name]
            update = getattr(self, f'_{self.kind}')(name, tensor.grad.astype(tensor.data.dtype, copy=False))
            tensor.data += update
        params.zero_grad()

    def _slot(self, slot, name, like):
        table = self.slots[slot]
        if name not in table:
            table[name] = np.zeros_like(like)
        return table[name]

    def _sgd(self, name, g):
        return -self.hyper['lr'] * g

    def _adam(self, name, g):
        h = self.hyper
        m = self._slot('m', name, g)
        v = self._slot('v', name, g)
        m *= h['beta1']
        m += (1.0 - h['beta1']) * g
        v *= h['beta2']
        v += (1.0 - h['beta2']) * g * g
        m_hat = m / (1.0 - h['beta1'] ** self.t)
        v_hat = v / (1.0 - h['beta2'] ** self.t)
        return -h['lr'] * m_hat / (np.sqrt(v_hat) + h['eps'])

    def _adadelta(self, name, g):
        h = self.hyper
        acc_g = self._slot('acc_grad', name, g)
        acc_d = self._slot('acc_delta', name, g)
        acc_g *= h['rho']
        acc_g += (1.0 - h['rho']) * g * g
        delta = -np.sqrt(acc_d + h['eps']) / np.sqrt(acc_g + h['eps']) * g
        acc_d *= h['rho']
        acc_d += (1.0 - h['rho']) * delta * delta
        return h['lr'] * delta

    def state_dict(self):
        """Metadati serializzabili (gli slot sono salvati a parte come tensori)."""
        return {'kind': self.kind, 'hyper': dict(self.hyper), 't': self.t}

    @classmethod
    def from_state(cls, meta, slots):
        opt = cls(meta['kind'], **meta['hyper'])
        opt.t = int(meta['t'])
        for slot, table in slots.items():
            opt.slots[slot] = dict(table)
        return opt

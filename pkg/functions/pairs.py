"""
Campionamento delle coppie di caratteri per il discriminatore multi-classe.

Dati i caratteri codificati di un'immagine sorgente (CR^s) e di una
target (CR^t), ogni coppia cade in uno di quattro gruppi:
    G1: (sorgente, sorgente), stessa etichetta
    G2: (sorgente, target), stessa etichetta
    G3: (sorgente, sorgente), etichette diverse
    G4: (sorgente, target), etichette diverse
Le coppie target x target non vengono mai campionate.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

GROUP_NAMES = ('G1', 'G2', 'G3', 'G4')
DOMAINS = ('source', 'target')


@dataclass(eq=False)
class CharFeature:
    """
    Feature di un carattere decodificato.

    Il vettore e' la riga `row` del Tensor `bank` (tutti i passi di una
    traccia), cosi' i gradienti tornano all'encoder/decoder.
    """
    bank: object
    row: int
    label: int
    domain: str
    sample_id: object = None
    step: int = 0

    @property
    def vector(self):
        return self.bank.data[self.row]

    @property
    def dim(self):
        return self.bank.shape[1]


@dataclass
class PairGroup:
    group: str
    pairs: list = field(default_factory=list)

    @property
    def index(self):
        return GROUP_NAMES.index(self.group)

    def __len__(self):
        return len(self.pairs)


def empty_groups():
    return tuple(PairGroup(name) for name in GROUP_NAMES)


def _check_domain(chars, domain, role):
    for c in chars:
        if c.domain != domain:
            raise ValueError(f"feature di dominio {c.domain!r} nella lista {role} "
                             f"(campione {c.sample_id}, passo {c.step})")


def sample_pairs(source_chars, target_chars):
    """
    Tutte le coppie CR^s x CR^t e CR^s x CR^s, smistate nei quattro gruppi.

    Le coppie sorgente x sorgente includono le auto-coppie ed entrambi gli
    ordini. Totale coppie = L^2 + L * L'.

    Returns:
        tupla (G1, G2, G3, G4) di PairGroup
    """
    if not source_chars or not target_chars:
        raise ValueError("servono caratteri sia sorgente sia target")
    _check_domain(source_chars, 'source', 'sorgente')
    _check_domain(target_chars, 'target', 'target')

    g1, g2, g3, g4 = empty_groups()
    for a in source_chars:
        for b in target_chars:
            (g2 if a.label == b.label else g4).pairs.append((a, b))
    for a in source_chars:
        for b in source_chars:
            (g1 if a.label == b.label else g3).pairs.append((a, b))
    return g1, g2, g3, g4


def merge_groups(group_sets):
    """Unisce piu' tuple (G1..G4) gruppo per gruppo, mantenendo l'ordine."""
    merged = empty_groups()
    for groups in group_sets:
        for target, source in zip(merged, groups):
            target.pairs.extend(source.pairs)
    return merged


def subsample_balanced(groups, per_group, rng_seed):
    """
    Sottocampiona ogni gruppo a al piu' per_group coppie, uniforme e senza
    reinserimento. I gruppi piu' piccoli passano interi.

    Args:
        rng_seed: seed intero oppure np.random.Generator gia' inizializzato
    """
    if per_group < 1:
        raise ValueError(f"per_group deve essere >= 1, trovato {per_group}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = []
    for g in groups:
        if len(g.pairs) <= per_group:
            out.append(PairGroup(g.group, list(g.pairs)))
            continue
        chosen = np.sort(rng.choice(len(g.pairs), size=per_group, replace=False))
        out.append(PairGroup(g.group, [g.pairs[i] for i in chosen]))
    return tuple(out)


def extract_char_features(trace, labels, variant, domain, sample_ids=None, batch_offset=0):
    """
    Una CharFeature per posizione di etichetta (passo EOS escluso).

    Args:
        trace: DecodeTrace in teacher forcing con queste etichette
        labels: etichette (senza EOS) dei campioni batch_offset, batch_offset+1, ...
        variant: 'CR' (contesto) o 'CR_plus' (stato ricorrente)
        domain: 'source' o 'target'
        sample_ids: identificativi dei campioni (default: indice nel batch)
        batch_offset: primo campione della traccia a cui si riferiscono le etichette

    Returns:
        lista ordinata per campione e poi per passo
    """
    if trace.mode != 'teacher':
        raise ValueError("servono tracce in teacher forcing: la decodifica greedy non ha etichette")
    if variant not in ('CR', 'CR_plus'):
        raise ValueError(f"variante di feature sconosciuta: {variant!r}")
    if domain not in DOMAINS:
        raise ValueError(f"dominio sconosciuto: {domain!r}")
    labels = [tuple(l) for l in labels]
    if labels != trace.labels[batch_offset:batch_offset + len(labels)]:
        raise ValueError("le etichette non corrispondono alla traccia")
    if sample_ids is None:
        sample_ids = list(range(batch_offset, batch_offset + len(labels)))

    bank = trace.bank(variant)
    batch = trace.batch_size
    chars = []
    for k, label in enumerate(labels):
        b = batch_offset + k
        for t, symbol in enumerate(label):
            chars.append(CharFeature(bank=bank, row=t * batch + b, label=int(symbol),
                                     domain=domain, sample_id=sample_ids[k], step=t))
    return chars


def split_by_sample(chars):
    """Raggruppa le feature per campione, nell'ordine di prima apparizione."""
    buckets = {}
    for c in chars:
        buckets.setdefault(c.sample_id, []).append(c)
    return list(buckets.values())


def group_sizes(groups):
    return {g.group: len(g) for g in groups}


def pairs_to_frame(groups, alphabet=None):
    """Tabella delle coppie: gruppo, provenienza e etichette dei due elementi."""
    def name(symbol):
        return alphabet.symbols[symbol] if alphabet is not None else symbol

    rows = []
    for g in groups:
        for a, b in g.pairs:
            rows.append({
                'group': g.group,
                'first_domain': a.domain,
                'first_sample': a.sample_id,
                'first_step': a.step,
                'second_domain': b.domain,
                'second_sample': b.sample_id,
                'second_step': b.step,
                'first_label': name(a.label),
                'second_label': name(b.label),
            })
    columns = ['group', 'first_domain', 'first_sample', 'first_step', 'second_domain',
               'second_sample', 'second_step', 'first_label', 'second_label']
    return pd.DataFrame(rows, columns=columns)

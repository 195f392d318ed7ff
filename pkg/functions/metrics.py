"""
Metriche di valutazione: accuratezza di sequenza, CharAcc con allineamento
a distanza di edit minima, report di valutazione e probe di confusione
tra domini.
"""

from dataclasses import dataclass, field

import Levenshtein
import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from . import autodiff as ad
from .config import max_decode_steps
from .decoder import decode, predictions
from .discriminator import pair_matrix, predict_groups
from .encoder import encode_batch
from .errors import DataError
from .trainer import check_compatible


def sequence_accuracy(preds, gts):
    """Frazione di stringhe predette identiche alla ground truth."""
    if len(preds) != len(gts):
        raise ValueError(f"liste di lunghezza diversa: {len(preds)} vs {len(gts)}")
    if not gts:
        raise ValueError("liste vuote")
    return sum(p == g for p, g in zip(preds, gts)) / len(gts)


def edit_table(pred, gt):
    """Tabella DP della distanza di Levenshtein (costi unitari), (len(pred)+1, len(gt)+1)."""
    n, m = len(pred), len(gt)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    table[:, 0] = np.arange(n + 1)
    table[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if pred[i - 1] == gt[j - 1] else 1
            table[i, j] = min(table[i - 1, j - 1] + cost, table[i - 1, j] + 1, table[i, j - 1] + 1)
    return table


def aligned_matches(pred, gt):
    """
    Numero di posizioni allineate uguali in un allineamento a edit minimo.

    Nel backtrack le parita' si risolvono con la preferenza
    match > sostituzione > cancellazione > inserimento.
    """
    table = edit_table(pred, gt)
    i, j = len(pred), len(gt)
    matches = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and pred[i - 1] == gt[j - 1] and table[i, j] == table[i - 1, j - 1]:
            matches += 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and table[i, j] == table[i - 1, j - 1] + 1:
            i, j = i - 1, j - 1
        elif i > 0 and table[i, j] == table[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    return matches


def char_acc(pred, gt):
    """CharAcc = caratteri allineati correttamente / |gt|."""
    if len(gt) == 0:
        raise ValueError("ground truth vuota")
    return aligned_matches(pred, gt) / len(gt)


def dataset_char_acc(preds, gts, mode='mean'):
    """
    CharAcc su un dataset.

    mode 'mean': media dei rapporti per campione; 'total': somma N / somma |gt|.
    """
    if len(preds) != len(gts) or not gts:
        raise ValueError("servono liste non vuote della stessa lunghezza")
    if mode == 'mean':
        return float(np.mean([char_acc(p, g) for p, g in zip(preds, gts)]))
    if mode == 'total':
        return sum(aligned_matches(p, g) for p, g in zip(preds, gts)) / sum(len(g) for g in gts)
    raise ValueError(f"modalita' CharAcc sconosciuta: {mode!r}")


@dataclass
class EvalReport:
    name: str
    n: int
    sequence_accuracy: float
    char_acc: float
    records: list = field(default_factory=list)
    characc_mode: str = 'mean'

    def to_frame(self):
        return pd.DataFrame(self.records, columns=['id', 'prediction', 'ground_truth', 'correct',
                                                   'char_acc', 'edit_distance'])

    def summary(self):
        lines = [
            '=' * 50,
            f"Dataset:              {self.name}",
            f"Campioni:             {self.n}",
            f"Sequence accuracy:    {self.sequence_accuracy:.4f}",
            f"CharAcc ({self.characc_mode}):{' ' * max(1, 9 - len(self.characc_mode))}{self.char_acc:.4f}",
            '=' * 50,
        ]
        return '\n'.join(lines)

    def save(self, path):
        """Scrive il TSV per campione e il riepilogo in <path>.summary.txt."""
        self.to_frame().to_csv(path, sep='\t', index=False, float_format='%.17g', lineterminator='\n')
        with open(f"{path}.summary.txt", 'w', encoding='utf-8') as f:
            f.write(self.summary() + '\n')


def greedy_predictions(state, images, batch_size=None):
    """Decodifica greedy a batch; ritorna le sequenze di indici (senza EOS)."""
    batch_size = batch_size or state.cfg['eval_batch']
    max_steps = max_decode_steps(state.cfg)
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            feats = encode_batch(images[start:start + batch_size], state.params, state.cfg)
            trace = decode(feats, state.params, state.ia, mode='greedy', max_steps=max_steps)
            out.extend(predictions(trace))
    return out


def evaluate(state, dataset, characc=None):
    """
    Decodifica greedy di ogni campione e calcolo delle due metriche.

    Solleva DataError se geometria o alfabeto del dataset non sono quelli
    del modello.
    """
    if len(dataset) == 0:
        raise DataError("dataset vuoto")
    check_compatible(state, dataset)
    characc = characc or state.cfg['characc']
    alphabet = dataset.alphabet
    preds = [alphabet.decode(p) for p in greedy_predictions(state, dataset.images())]
    gts = [alphabet.decode(label) for label in dataset.labels()]

    records = []
    for sample_id, p, g in zip(dataset.ids, preds, gts):
        records.append({
            'id': sample_id,
            'prediction': p,
            'ground_truth': g,
            'correct': int(p == g),
            'char_acc': char_acc(p, g),
            'edit_distance': Levenshtein.distance(p, g),
        })
    return EvalReport(name=dataset.name, n=len(dataset),
                      sequence_accuracy=sequence_accuracy(preds, gts),
                      char_acc=dataset_char_acc(preds, gts, characc),
                      records=records, characc_mode=characc)


# ============ CONFUSIONE TRA DOMINI ============

def probe_domain_confusion(g1, g2, seed=0, test_size=0.3):
    """
    Accuratezza di un probe logistico nuovo che separa coppie G1 da G2.

    Il probe e' addestrato su una parte delle coppie e valutato sul resto;
    un valore vicino a 0.5 indica che i domini non sono distinguibili.
    """
    if len(g1) < 2 or len(g2) < 2:
        raise ValueError("servono almeno due coppie per ciascun gruppo")
    with ad.no_grad():
        x = pair_matrix(list(g1.pairs) + list(g2.pairs), detach=True).data
    y = np.array([0] * len(g1) + [1] * len(g2))
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, test_size=test_size, random_state=seed, stratify=y)
    probe = LogisticRegression(max_iter=1000)
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


def mcd_group_accuracy(groups, params):
    """
    Accuratezza dell'MCD su coppie tenute da parte.

    Returns:
        dict con 'four_way' (argmax sui 4 gruppi) e 'g1_vs_g2' (coppie G1 e
        G2, decisione tra le sole colonne G1 e G2)
    """
    probs, truth = predict_groups(groups, params)
    out = {'four_way': float(np.mean(np.argmax(probs, axis=1) == truth))}
    mask = truth <= 1
    if mask.any():
        binary = np.argmax(probs[mask][:, :2], axis=1)
        out['g1_vs_g2'] = float(np.mean(binary == truth[mask]))
    return out

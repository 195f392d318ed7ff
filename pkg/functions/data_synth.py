"""
Modulo per la generazione dei dataset sintetici multi-dominio.

Sorgente = rendering pulito del font bitmap; target = rendering perturbato
(shear, jitter dei tratti, rumore, inversione). Formato su disco:
manifest.tsv (id, label, file), meta.json, immagini PGM binarie (P5) 8 bit.
"""

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from .config import DOMINI, threads_from_env
from .errors import DataError
from .font import scaled_glyph

MANIFEST = 'manifest.tsv'
META = 'meta.json'
IMAGES_DIR = 'images'

# Sale per separare i flussi casuali del rendering
_SALT_JITTER = 1
_SALT_NOISE = 2
_SPLIT_CODES = {'train': 0, 'test': 1}


@dataclass(frozen=True)
class Alphabet:
    """Simboli renderizzabili; l'EOS ha indice len(symbols)."""
    symbols: str

    def __post_init__(self):
        if not self.symbols or len(set(self.symbols)) != len(self.symbols):
            raise ValueError("l'alfabeto deve contenere simboli distinti (almeno uno)")

    @property
    def eos_index(self):
        return len(self.symbols)

    @property
    def num_classes(self):
        return len(self.symbols) + 1

    def encode(self, text):
        try:
            return tuple(self.symbols.index(c) for c in text)
        except ValueError:
            raise DataError(f"simbolo non presente nell'alfabeto in {text!r}") from None

    def decode(self, indices):
        """Indici -> stringa, fermandosi al primo EOS."""
        out = []
        for i in indices:
            i = int(i)
            if i >= self.eos_index:
                break
            out.append(self.symbols[i])
        return ''.join(out)


@dataclass(frozen=True)
class Geometry:
    height: int
    glyph_width: int
    max_len: int

    @property
    def width(self):
        return self.glyph_width * self.max_len


@dataclass(frozen=True)
class DomainSpec:
    name: str
    noise_sigma: float = 0.0
    invert: bool = False
    shear: float = 0.0
    stroke_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.stroke_jitter < 0:
            raise ValueError("noise_sigma e stroke_jitter devono essere >= 0")

    @property
    def is_clean(self):
        return (self.noise_sigma == 0 and not self.invert
                and self.shear == 0 and self.stroke_jitter == 0)


@dataclass(eq=False)
class Sample:
    image: np.ndarray
    label: tuple

    def __eq__(self, other):
        return (isinstance(other, Sample) and tuple(self.label) == tuple(other.label)
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


@dataclass(eq=False)
class Dataset:
    domain: DomainSpec
    samples: list
    split: str
    alphabet: Alphabet
    geometry: Geometry
    ids: list = field(default=None)
    _stack: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.samples:
            raise DataError(f"dataset vuoto per il dominio {self.domain.name}")
        if self.split not in _SPLIT_CODES:
            raise DataError(f"split non valido: {self.split!r}")
        if self.ids is None:
            self.ids = [f"{i:06d}" for i in range(len(self.samples))]

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.domain == other.domain
                and self.split == other.split and self.alphabet == other.alphabet
                and self.geometry == other.geometry and self.ids == other.ids
                and len(self.samples) == len(other.samples)
                and all(a == b for a, b in zip(self.samples, other.samples)))

    @property
    def name(self):
        return f"{self.domain.name}_{self.split}"

    def images(self):
        """Immagini impilate (N, H, W), calcolate una volta."""
        if self._stack is None:
            self._stack = np.stack([s.image for s in self.samples])
        return self._stack

    def labels(self, indices=None):
        if indices is None:
            return [s.label for s in self.samples]
        return [self.samples[i].label for i in indices]

    def subset(self, indices, split=None):
        return Dataset(self.domain, [self.samples[i] for i in indices], split or self.split,
                       self.alphabet, self.geometry, ids=[self.ids[i] for i in indices])


def domain_from_preset(name, **overrides):
    """DomainSpec da un dominio predefinito in config.DOMINI."""
    if name not in DOMINI:
        raise DataError(f"dominio sconosciuto: {name!r} (disponibili: {list(DOMINI)})")
    params = dict(DOMINI[name])
    params.update(overrides)
    return DomainSpec(name=name, **params)


def parse_domain(text):
    """
    Interpreta un dominio da CLI: nome predefinito oppure
    'nome:noise=0.1,invert=1,shear=0.2,jitter=0,seed=7'.
    """
    if ':' not in text:
        return domain_from_preset(text)
    name, rest = text.split(':', 1)
    keys = {'noise': 'noise_sigma', 'invert': 'invert', 'shear': 'shear',
            'jitter': 'stroke_jitter', 'seed': 'seed'}
    base = dict(DOMINI.get(name, {}))
    for item in filter(None, rest.split(',')):
        if '=' not in item:
            raise DataError(f"parametro di dominio non valido: {item!r}")
        key, value = item.split('=', 1)
        if key not in keys:
            raise DataError(f"parametro di dominio sconosciuto: {key!r}")
        attr = keys[key]
        if attr == 'invert':
            base[attr] = value.lower() in ('1', 'true', 'yes', 'si')
        elif attr == 'seed':
            base[attr] = int(value)
        else:
            base[attr] = float(value)
    try:
        return DomainSpec(name=name, **base)
    except ValueError as e:
        raise DataError(str(e)) from None


# ============ RENDERING ============

def _shear(image, factor):
    if factor == 0:
        return image
    height = image.shape[0]
    # colonna sorgente = colonna + factor * (riga - centro)
    matrix = np.array([[1.0, 0.0], [factor, 1.0]])
    offset = np.array([0.0, -factor * (height - 1) / 2.0])
    return ndimage.affine_transform(image, matrix, offset=offset, order=1,
                                    mode='constant', cval=0.0)


def _jitter(image, amount, rng):
    if amount == 0:
        return image
    h, w = image.shape
    dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.0, mode='reflect')
    dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.0, mode='reflect')
    dy *= amount / (np.abs(dy).max() + 1e-12)
    dx *= amount / (np.abs(dx).max() + 1e-12)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    return ndimage.map_coordinates(image, [rows + dy, cols + dx], order=1,
                                   mode='constant', cval=0.0)


def render_sample(label, spec, index, geometry, alphabet):
    """
    Renderizza una striscia di glifi.

    Il glifo k occupa le colonne [k*glyph_width, (k+1)*glyph_width) prima
    dello shear. Ordine delle perturbazioni: shear, jitter, rumore,
    inversione, clamp in [0, 1] e quantizzazione a 8 bit.
    """
    label = tuple(int(i) for i in label)
    if not 1 <= len(label) <= geometry.max_len:
        raise DataError(f"lunghezza etichetta {len(label)} fuori da [1, {geometry.max_len}]")
    if any(i < 0 or i >= len(alphabet.symbols) for i in label):
        raise DataError(f"indice di simbolo fuori intervallo in {label}")

    gw = geometry.glyph_width
    image = np.zeros((geometry.height, geometry.width))
    for k, symbol in enumerate(label):
        image[:, k * gw:(k + 1) * gw] = scaled_glyph(alphabet.symbols[symbol], geometry.height, gw)

    image = _shear(image, spec.shear)
    if spec.stroke_jitter > 0:
        rng = np.random.default_rng([spec.seed, index, _SALT_JITTER])
        image = _jitter(image, spec.stroke_jitter, rng)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, index, _SALT_NOISE])
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    if spec.invert:
        image = 1.0 - image
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0
    return Sample(image=image, label=label)


def generate_dataset(n, spec, alphabet, geometry, length_dist=(1, None), split='train',
                     offset=0, threads=None, verbose=False):
    """
    Genera n campioni con etichette i.i.d. uniformi.

    Args:
        n: numero di campioni
        spec: DomainSpec (il suo seed inizializza il generatore delle etichette)
        length_dist: (min, max) della lunghezza, uniforme; max None = geometry.max_len
        split: 'train' o 'test' (flussi di etichette indipendenti)
        offset: primo indice di rendering (separa i campioni tra split)
        threads: worker di rendering (default: FASDA_THREADS)

    Returns:
        Dataset
    """
    if n < 1:
        raise DataError(f"n deve essere >= 1, trovato {n}")
    lo, hi = length_dist
    hi = geometry.max_len if hi is None else hi
    if not 1 <= lo <= hi <= geometry.max_len:
        raise DataError(f"distribuzione di lunghezza non valida: [{lo}, {hi}]")
    if split not in _SPLIT_CODES:
        raise DataError(f"split non valido: {split!r}")

    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split]])
    labels = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        labels.append(tuple(int(s) for s in rng.integers(0, len(alphabet.symbols), size=length)))

    def render(i):
        return render_sample(labels[i], spec, offset + i, geometry, alphabet)

    threads = threads or threads_from_env()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(render, range(n)))
    else:
        samples = [render(i) for i in range(n)]

    if verbose:
        print(f"  Generati {n} campioni per il dominio {spec.name} ({split})")
    return Dataset(domain=spec, samples=samples, split=split, alphabet=alphabet, geometry=geometry)


def dataset_digest(ds):
    """Hash SHA-256 di etichette e pixel (controllo di determinismo)."""
    h = hashlib.sha256()
    for sample_id, sample in zip(ds.ids, ds.samples):
        h.update(sample_id.encode('utf-8'))
        h.update(ds.alphabet.decode(sample.label).encode('utf-8'))
        h.update(np.round(sample.image * 255).astype(np.uint8).tobytes())
    return h.hexdigest()


def mean_image_gap(a, b):
    """Differenza media assoluta tra le immagini medie di due dataset."""
    return float(np.mean(np.abs(a.images().mean(axis=0) - b.images().mean(axis=0))))


# ============ I/O ============

def write_pgm(path, image):
    """Scrive un'immagine [0, 1] come PGM binario 8 bit."""
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def read_pgm(path):
    """Legge un PGM 8 bit e ritorna float in [0, 1]."""
    with Image.open(path) as img:
        if img.mode != 'L':
            raise DataError(f"{path}: atteso PGM a 8 bit in scala di grigi, trovato modo {img.mode}")
        return np.asarray(img, dtype=np.uint8).astype(np.float64) / 255.0


def save_dataset(ds, directory):
    """Salva manifest.tsv, meta.json e le immagini PGM."""
    os.makedirs(os.path.join(directory, IMAGES_DIR), exist_ok=True)
    rows = []
    for sample_id, sample in zip(ds.ids, ds.samples):
        rel = f"{IMAGES_DIR}/{sample_id}.pgm"
        write_pgm(os.path.join(directory, rel), sample.image)
        rows.append({'id': sample_id, 'label': ds.alphabet.decode(sample.label), 'file': rel})
    pd.DataFrame(rows, columns=['id', 'label', 'file']).to_csv(
        os.path.join(directory, MANIFEST), sep='\t', index=False, lineterminator='\n')

    meta = {
        'domain': asdict(ds.domain),
        'split': ds.split,
        'alphabet': ds.alphabet.symbols,
        'geometry': asdict(ds.geometry),
    }
    with open(os.path.join(directory, META), 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')


def load_dataset(directory):
    """
    Carica un dataset salvato con save_dataset.

    Solleva DataError (con il nome del file) su manifest malformato,
    immagini mancanti o etichette incompatibili con l'immagine.
    """
    manifest_path = os.path.join(directory, MANIFEST)
    meta_path = os.path.join(directory, META)
    for path in (manifest_path, meta_path):
        if not os.path.exists(path):
            raise DataError(f"file mancante: {path}")

    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        domain = DomainSpec(**meta['domain'])
        alphabet = Alphabet(meta['alphabet'])
        geometry = Geometry(**meta['geometry'])
        split = meta['split']
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{meta_path}: metadati malformati ({e})") from None

    try:
        manifest = pd.read_csv(manifest_path, sep='\t', dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{manifest_path}: manifest malformato ({e})") from None
    if list(manifest.columns) != ['id', 'label', 'file']:
        raise DataError(f"{manifest_path}: colonne attese id, label, file; trovate {list(manifest.columns)}")
    if manifest.empty:
        raise DataError(f"{manifest_path}: manifest vuoto")

    samples = []
    for row in manifest.itertuples(index=False):
        image_path = os.path.join(directory, row.file)
        if not os.path.exists(image_path):
            raise DataError(f"immagine mancante: {image_path}")
        image = read_pgm(image_path)
        label = alphabet.encode(row.label)
        if image.shape[0] != geometry.height:
            raise DataError(f"{image_path}: altezza {image.shape[0]} diversa da {geometry.height}")
        if not 1 <= len(label) <= image.shape[1] // geometry.glyph_width:
            raise DataError(f"{image_path}: etichetta di lunghezza {len(label)} "
                            f"incompatibile con larghezza {image.shape[1]}")
        samples.append(Sample(image=image, label=label))

    return Dataset(domain=domain, samples=samples, split=split, alphabet=alphabet,
                   geometry=geometry, ids=list(manifest['id']))

"""
Eccezioni del laboratorio FASDA.

Ogni eccezione porta il codice di uscita usato dalla CLI (main.py).
"""


class FasdaError(Exception):
    """Errore base: la CLI lo stampa su una riga ed esce con exit_code."""
    exit_code = 1


class ConfigError(FasdaError):
    """Configurazione o parametri non validi."""
    exit_code = 2


class DataError(FasdaError):
    """Dataset malformato, file mancanti, geometria incompatibile."""
    exit_code = 3


class CheckpointError(FasdaError):
    """Checkpoint illeggibile, troncato o di versione non supportata."""
    exit_code = 4


class ShapeError(ValueError):
    """Forme incompatibili in un'operazione sui tensori."""

    def __init__(self, op, *shapes, detail=''):
        shapes_txt = ' vs '.join(str(tuple(s)) for s in shapes)
        msg = f"{op}: forme incompatibili {shapes_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes

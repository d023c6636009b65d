import logging
import sys

_FORMAT = "[%(asctime)s] %(name)s %(levelname)s: %(message)s"
_DATEFMT = "%m/%d %H:%M:%S"


def setup_logger(name="flowsolve", level=logging.INFO, stream=None):
    """Attach a single stderr handler to the package logger.

    Calling it again only updates the level, so scripts and the CLI can both
    call it without duplicating output.

    Parameters
    ----------
    name : str
        Logger name, ``"flowsolve"`` configures the whole package.
    level : int or str
        Logging level.
    stream : file-like, optional
        Output stream, defaults to ``sys.stderr``.

    Returns
    -------
    logging.Logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    if not any(getattr(h, "_flowsolve", False) for h in logger.handlers):
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
        handler._flowsolve = True
        logger.addHandler(handler)
    return logger

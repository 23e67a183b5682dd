import logging

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(verbose: bool = False, quiet: bool = False) -> int:
    """
    Configure the root logger once for command-line use

    Args:
        verbose: Log DEBUG records
        quiet: Only log warnings and errors

    Returns:
        The level that was set
    """
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    return level

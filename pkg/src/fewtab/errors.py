class FewtabError(Exception):
    """Base class for user-facing errors: bad files, bad config, bad data.

    Anything else escaping the library is a bug, and the CLI reports it as
    an internal error.
    """

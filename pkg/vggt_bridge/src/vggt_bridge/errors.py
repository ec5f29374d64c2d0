class BridgeError(Exception):
    """Unrecoverable export problem: bad inputs, missing model, bad config."""

class LongTailError(ValueError):
    """Base class for every error raised by the recommender toolkit."""


class ConfigError(LongTailError):
    pass


class UsageError(ConfigError):
    pass


class MissingArtifactError(ConfigError):

    def __init__(self, artifact: str, hint: str = "") -> None:
        self.artifact = artifact
        message = f"Missing artifact: {artifact}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class DataError(LongTailError):
    pass


class DuplicateRatingError(DataError):

    def __init__(self, user_id: str, item_id: str, ratings: list) -> None:
        self.user_id = user_id
        self.item_id = item_id
        super().__init__(
            f"Conflicting duplicate ratings {ratings} for user={user_id} item={item_id}; "
            f"use the keep-last duplicate policy to accept the latest one"
        )


class InsufficientDataError(DataError):
    pass


class MissingEntropyError(DataError):

    def __init__(self, user_id: str) -> None:
        self.user_id = user_id
        super().__init__(f"Entropy table has no entry for user {user_id}")


class UnknownNodeError(DataError):
    pass


class GraphError(LongTailError):
    pass


class EmptyGraphError(GraphError):
    pass


class IsolatedNodeError(GraphError):

    def __init__(self, node: str) -> None:
        self.node = node
        super().__init__(
            f"Node {node} has zero degree; isolated nodes must be pruned when the graph is built"
        )


class DisconnectedGraphError(GraphError):

    def __init__(self, component_sizes: list) -> None:
        self.component_sizes = component_sizes
        super().__init__(
            f"Graph has {len(component_sizes)} connected components "
            f"(sizes {component_sizes[:10]}); restrict to the largest component first"
        )


class DistributionError(LongTailError):
    pass

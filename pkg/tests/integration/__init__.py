# This file makes Python treat the `integration` directory as a package.

/* Copyright 2026 The provit Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

	http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace provit {

// Base of every error the library throws. The subclasses mirror the error
// categories surfaced through the CLI exit codes.
class Error : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

class FormatError : public Error {
public:
	using Error::Error;
};

class UnsupportedError : public Error {
public:
	using Error::Error;
};

class IoError : public Error {
public:
	using Error::Error;
};

class ArgumentError : public Error {
public:
	using Error::Error;
};

class NumericError : public Error {
public:
	using Error::Error;
};

// Metric requested on data for which it is not defined (e.g. AUROC with one class).
class UndefinedMetricError : public Error {
public:
	using Error::Error;
};

class LoadError : public Error {
public:
	using Error::Error;
};

// Carries an RFC 6901 pointer to the offending field when one is known.
class ConfigError : public Error {
public:
	explicit ConfigError( const std::string& message, std::string pointer = "" )
		: Error( pointer.empty() ? message : pointer + ": " + message ), message_( message ), pointer_( std::move( pointer ) )
	{}

	const std::string& pointer() const { return pointer_; }
	const std::string& message() const { return message_; }

	// Same error, relocated under a parent key.
	ConfigError under( const std::string& parentKey ) const { return ConfigError( message_, "/" + parentKey + pointer_ ); }

private:
	std::string message_;
	std::string pointer_;
};

} // namespace provit
